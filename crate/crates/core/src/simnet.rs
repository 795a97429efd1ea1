//! Deterministic partially synchronous network: scenario files, the two-phase
//! tick loop, delivery audits, JSONL traces and run metrics.

use std::collections::{BTreeMap, BTreeSet};

use rustc_hash::FxHashSet as HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{choose_delivery, delivery_bound, AdversaryConfig, ByzantineNode, Coalition, DeliveryPolicy};
use crate::certs::{KeyRing, SignedMsg};
use crate::chainstr::{ChainString, HashBackend, HashOracle};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::node::{Dest, Node, NodeEvent, Payload, Send};
use crate::params::ProtocolParams;
use crate::simplex_odd::{OddEvent, OddMsg};
use crate::snowman_even::{EvenEvent, FinalityRule, MintPolicy};
use crate::types::{is_odd, Epoch, ProcessId, Round, Timeslot};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    /// Stop once every correct process has reached this epoch.
    pub at_epoch: Option<Epoch>,
    /// Stop once every correct process's `final` holds this many blocks past genesis.
    pub finalized_blocks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub gst: Timeslot,
    pub horizon: Timeslot,
    /// Ids of the Byzantine processes.
    pub byzantine: Vec<usize>,
    /// Permits `f ≥ n/5`, for negative controls only.
    pub allow_excess_faults: bool,
    pub hash_backend: HashBackend,
    /// Also record every delivered message in the trace.
    pub trace_messages: bool,
    pub params: ProtocolParams,
    pub mint: MintPolicy,
    pub adversary: AdversaryConfig,
    pub stop: StopRule,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            seed: 0,
            gst: 0,
            horizon: 1000,
            byzantine: Vec::new(),
            allow_excess_faults: false,
            hash_backend: HashBackend::Oracle,
            trace_messages: false,
            params: ProtocolParams::default(),
            mint: MintPolicy::default(),
            adversary: AdversaryConfig::default(),
            stop: StopRule::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::Deserializer::new(s);
        let sc: Scenario = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Schema { path: e.path().to_string(), message: e.inner().message().to_string() })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if self.allow_excess_faults {
            p.validate_allowing_excess_faults()?;
        } else {
            p.validate()?;
        }
        let set: BTreeSet<usize> = self.byzantine.iter().copied().collect();
        if set.len() != self.byzantine.len() {
            return Err(Error::InvalidScenario("byzantine ids repeat".into()));
        }
        if let Some(&i) = set.iter().find(|&&i| i >= p.n) {
            return Err(Error::InvalidScenario(format!("byzantine id {i} is outside 0..{}", p.n)));
        }
        if set.len() > p.f {
            return Err(Error::InvalidScenario(format!("{} byzantine ids exceed f={}", set.len(), p.f)));
        }
        Ok(())
    }

    pub fn byzantine_set(&self) -> BTreeSet<ProcessId> {
        self.byzantine.iter().map(|&i| ProcessId(i)).collect()
    }
}

/// One record of the JSONL trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub tick: Timeslot,
    pub node: usize,
    pub epoch: Epoch,
    pub kind: String,
    pub digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct TraceHeader<'a> {
    seq: u64,
    kind: &'static str,
    scenario: &'a Scenario,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FinalRecord {
    pub t: Timeslot,
    pub epoch: Epoch,
    pub value: ChainString,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StuckRecord {
    pub node: ProcessId,
    pub epoch: Epoch,
    pub round: Round,
    pub lastfinalized: Round,
    pub t: Timeslot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conclusion {
    pub node: ProcessId,
    pub epoch: Epoch,
    pub t: Timeslot,
    pub views: u64,
    pub fin: ChainString,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunMetrics {
    pub n: usize,
    pub hash_bits: u32,
    pub gst: Timeslot,
    pub delta: u64,
    pub gamma: u64,
    pub ticks: Timeslot,
    pub messages: u64,
    pub correct: Vec<ProcessId>,
    /// Shortest correct `final` at the end of each tick.
    pub floor: Vec<ChainString>,
    /// Least and greatest correct epoch at the end of each tick.
    pub epoch_range: Vec<(Epoch, Epoch)>,
    /// Per process: `(epoch, entry time)`.
    pub epoch_entries: Vec<Vec<(Epoch, Timeslot)>>,
    /// Per process: every value its `final` took.
    pub finals: Vec<Vec<FinalRecord>>,
    pub finalizations: u64,
    pub reported_finalizations: u64,
    pub stuck: Vec<StuckRecord>,
    pub conclusions: Vec<Conclusion>,
    /// Non-dummy blocks notarized at correct processes, per `(e, h)`.
    pub notarized: BTreeMap<(Epoch, u64), BTreeSet<Digest>>,
    /// Distinct non-dummy blocks proposed by any process, per `(e, h)`.
    pub proposed: BTreeMap<(Epoch, u64), BTreeSet<Digest>>,
    pub pacing_violations: Vec<String>,
    pub delivery_violations: Vec<String>,
    pub forgery_rejections: Vec<String>,
    pub dropped_malformed: u64,
}

impl RunMetrics {
    /// `final_t`: the shortest correct `final` at the end of tick `t`.
    pub fn final_floor(&self, t: Timeslot) -> Option<&ChainString> {
        self.floor.get(t as usize)
    }

    /// Blocks past genesis in the shortest final ever held at the end of the run.
    pub fn min_final_blocks(&self) -> usize {
        let l = self.hash_bits as usize;
        self.correct
            .iter()
            .map(|p| self.finals[p.0].last().map_or(0, |r| r.value.len().saturating_sub(l) / l))
            .min()
            .unwrap_or(0)
    }

    pub fn max_epoch(&self) -> Epoch {
        self.epoch_range.last().map_or(0, |r| r.1)
    }

    pub fn entry_time(&self, p: ProcessId, e: Epoch) -> Option<Timeslot> {
        self.epoch_entries[p.0].iter().find(|(x, _)| *x == e).map(|(_, t)| *t)
    }

    /// `(e, h)` pairs where correct processes saw two distinct non-dummy notarized blocks.
    pub fn double_notarizations(&self) -> Vec<(Epoch, u64)> {
        self.notarized.iter().filter(|(_, s)| s.len() > 1).map(|(k, _)| *k).collect()
    }

    /// `(e, h)` pairs with two distinct proposed blocks.
    pub fn equivocations(&self) -> Vec<(Epoch, u64)> {
        self.proposed.iter().filter(|(_, s)| s.len() > 1).map(|(k, _)| *k).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Every pair of correct finals is prefix-comparable, and every odd-epoch
/// `fin` extends every correct final of the even epoch before it.
pub fn check_consistency(m: &RunMetrics) -> Verdict {
    let mut violations = Vec::new();
    let mut values: Vec<(&ChainString, ProcessId, Timeslot)> = Vec::new();
    for p in &m.correct {
        for r in &m.finals[p.0] {
            values.push((&r.value, *p, r.t));
        }
    }
    values.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)));
    values.dedup_by(|a, b| a.0 == b.0);
    for w in values.windows(2) {
        if !w[1].0.starts_with(w[0].0) {
            violations.push(format!(
                "final of {} at t={} ({} bits) conflicts with final of {} at t={} ({} bits)",
                w[0].1, w[0].2, w[0].0.len(), w[1].1, w[1].2, w[1].0.len()
            ));
        }
    }
    for c in &m.conclusions {
        for p in &m.correct {
            for r in m.finals[p.0].iter().filter(|r| r.epoch + 1 == c.epoch) {
                if !c.fin.starts_with(&r.value) {
                    violations.push(format!(
                        "fin of epoch {} at {} does not extend the final {} held in epoch {}",
                        c.epoch, c.node, p, r.epoch
                    ));
                }
            }
        }
    }
    Verdict { ok: violations.is_empty(), violations }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Claim3Report {
    pub checked: u64,
    pub violations: Vec<Timeslot>,
}

/// For every `t ≥ GST` with all correct processes in one even epoch `e`, by
/// `t + 4Δγ` the floor properly extends `final_t` or all correct processes
/// are past `e`. Timeslots too close to the end of the run are skipped.
pub fn check_claim3(m: &RunMetrics) -> Claim3Report {
    let span = 4 * m.delta * m.gamma;
    let mut rep = Claim3Report::default();
    for t in m.gst..m.ticks {
        let (lo, hi) = m.epoch_range[t as usize];
        if lo != hi || is_odd(lo) {
            continue;
        }
        let Some(later) = m.epoch_range.get((t + span) as usize) else { break };
        rep.checked += 1;
        let (f0, f1) = (&m.floor[t as usize], &m.floor[(t + span) as usize]);
        let extends = f1.len() > f0.len() && f1.starts_with(f0);
        if !(extends || later.0 > lo) {
            rep.violations.push(t);
        }
    }
    rep
}

/// Epoch-entry spread: for every odd epoch entered after GST, the last correct
/// entry minus the first.
pub fn ec_entry_spread(m: &RunMetrics, e: Epoch) -> Option<(Timeslot, Timeslot)> {
    let times: Vec<Timeslot> = m.correct.iter().filter_map(|p| m.entry_time(*p, e)).collect();
    if times.len() != m.correct.len() {
        return None;
    }
    Some((*times.iter().min()?, *times.iter().max()?))
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seq: u64,
    pub kind: &'static str,
    pub scenario: String,
    pub seed: u64,
    pub ticks: Timeslot,
    pub messages: u64,
    pub max_epoch: Epoch,
    pub min_final_blocks: usize,
    pub floor_bits: usize,
    pub finalizations: u64,
    pub conclusions: usize,
    pub consistency_ok: bool,
    pub consistency_violations: usize,
    pub claim3_checked: u64,
    pub claim3_violations: usize,
    pub pacing_violations: usize,
    pub delivery_violations: usize,
    pub forgery_rejections: usize,
    pub double_notarizations: usize,
    pub equivocations: usize,
}

#[derive(Debug)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub consistency: Verdict,
    pub claim3: Claim3Report,
    pub summary: Summary,
    /// JSONL: header, records, summary.
    pub trace: Vec<String>,
}

impl RunReport {
    pub fn trace_text(&self) -> String {
        let mut s = self.trace.join("\n");
        s.push('\n');
        s
    }

    /// No consistency, delivery, pacing or notarization violation.
    pub fn ok(&self) -> bool {
        self.consistency.ok
            && self.metrics.delivery_violations.is_empty()
            && self.metrics.pacing_violations.is_empty()
            && self.metrics.double_notarizations().is_empty()
    }
}

#[derive(Debug)]
enum Proc {
    Correct(Node),
    Byzantine(ByzantineNode),
}

impl Proc {
    fn node(&self) -> &Node {
        match self {
            Proc::Correct(n) => n,
            Proc::Byzantine(b) => &b.inner,
        }
    }

    fn node_mut(&mut self) -> &mut Node {
        match self {
            Proc::Correct(n) => n,
            Proc::Byzantine(b) => &mut b.inner,
        }
    }

    fn step(&mut self, t: Timeslot, delivered: Vec<(ProcessId, Payload)>) -> Result<Vec<Send>> {
        match self {
            Proc::Correct(n) => n.step(t, delivered),
            Proc::Byzantine(b) => b.step(t, delivered),
        }
    }
}

struct Envelope {
    from: ProcessId,
    to: ProcessId,
    payload: Payload,
}

/// The top-level signed message inside a payload, if any.
fn signed_of(p: &Payload) -> Option<&SignedMsg> {
    match p {
        Payload::Stuck(m) => Some(m),
        Payload::Odd(OddMsg::StartVote(m)) | Payload::Odd(OddMsg::Finalize(m)) => Some(m),
        Payload::Odd(OddMsg::Propose(p)) => Some(&p.signed),
        Payload::Odd(OddMsg::Vote(v)) => Some(&v.signed),
        _ => None,
    }
}

pub struct Simulation {
    scenario: Scenario,
    procs: Vec<Proc>,
    byzantine: BTreeSet<ProcessId>,
    policy: DeliveryPolicy,
    rng: ChaCha8Rng,
    queue: BTreeMap<Timeslot, Vec<Envelope>>,
    t: Timeslot,
    metrics: RunMetrics,
    honest_tags: HashSet<Digest>,
    last_round_start: Vec<Option<(Epoch, Timeslot)>>,
    seq: u64,
    trace: Vec<String>,
}

fn event_record(ev: &NodeEvent) -> (String, String, Option<u64>) {
    let d = |x: &Digest| x.short();
    match ev {
        NodeEvent::EpochEntered { epoch } => ("epoch_entered".into(), String::new(), Some(*epoch)),
        NodeEvent::EcFormed { epoch } => ("ec_formed".into(), String::new(), Some(*epoch)),
        NodeEvent::Dropped { from, .. } => ("dropped".into(), String::new(), Some(from.0 as u64)),
        NodeEvent::Even(e) => match e {
            EvenEvent::RoundStarted { round, .. } => ("round_started".into(), String::new(), Some(*round)),
            EvenEvent::Finalized { sigma, rule, .. } => {
                let kind = match rule {
                    FinalityRule::Support => "finalized_support",
                    FinalityRule::Reported => "finalized_reported",
                };
                (kind.into(), d(&sigma.digest()), Some(sigma.len() as u64))
            }
            EvenEvent::Minted { height } => ("minted".into(), String::new(), Some(*height)),
            EvenEvent::StuckSent { round } => ("stuck_sent".into(), String::new(), Some(*round)),
        },
        NodeEvent::Odd(e) => match e {
            OddEvent::Ready => ("sc_ready".into(), String::new(), None),
            OddEvent::ViewEntered { h } => ("view_entered".into(), String::new(), Some(*h)),
            OddEvent::TimerFired { h } => ("timer_fired".into(), String::new(), Some(*h)),
            OddEvent::Voted { h, dummy } => {
                ((if *dummy { "voted_dummy" } else { "voted" }).into(), String::new(), Some(*h))
            }
            OddEvent::Rejected { h, .. } => ("proposal_rejected".into(), String::new(), Some(*h)),
            OddEvent::Notarized { h, block, dummy } => {
                ((if *dummy { "notarized_dummy" } else { "notarized" }).into(), d(block), Some(*h))
            }
            OddEvent::Finalized { h } => ("finalize_sent".into(), String::new(), Some(*h)),
            OddEvent::Concluded { fin, h } => ("concluded".into(), d(&fin.digest()), Some(*h)),
        },
    }
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let p = scenario.params.clone();
        let ring = KeyRing::new(p.n, scenario.seed);
        let oracle = HashOracle::shared(scenario.hash_backend, p.hash_bits, scenario.seed)?;
        let byzantine = scenario.byzantine_set();
        let coalition = Coalition { members: byzantine.clone(), ring: ring.clone(), oracle: oracle.clone() };
        let mut procs = Vec::with_capacity(p.n);
        for i in 0..p.n {
            let id = ProcessId(i);
            let node = Node::new(id, p.clone(), ring.clone(), oracle.clone(), scenario.mint.clone(), scenario.seed)?;
            procs.push(if byzantine.contains(&id) {
                Proc::Byzantine(ByzantineNode::new(node, scenario.adversary.clone(), coalition.clone()))
            } else {
                Proc::Correct(node)
            });
        }
        let correct: Vec<ProcessId> = (0..p.n).map(ProcessId).filter(|id| !byzantine.contains(id)).collect();
        let genesis = procs[0].node().final_value().clone();
        let metrics = RunMetrics {
            n: p.n,
            hash_bits: p.hash_bits,
            gst: scenario.gst,
            delta: p.delta,
            gamma: p.gamma,
            correct,
            epoch_entries: vec![vec![(0, 0)]; p.n],
            finals: vec![vec![FinalRecord { t: 0, epoch: 0, value: genesis }]; p.n],
            ..Default::default()
        };
        let mut rng_seed = [0u8; 32];
        rng_seed[..8].copy_from_slice(&scenario.seed.to_le_bytes());
        rng_seed[8..16].copy_from_slice(b"delivery");
        let header = serde_json::to_string(&TraceHeader { seq: 0, kind: "header", scenario: &scenario })?;
        Ok(Simulation {
            policy: scenario.adversary.delivery_policy(),
            rng: ChaCha8Rng::from_seed(rng_seed),
            procs,
            byzantine,
            queue: BTreeMap::new(),
            t: 0,
            metrics,
            honest_tags: HashSet::default(),
            last_round_start: vec![None; p.n],
            seq: 1,
            trace: vec![header],
            scenario,
        })
    }

    pub fn now(&self) -> Timeslot {
        self.t
    }

    pub fn node(&self, id: ProcessId) -> &Node {
        self.procs[id.0].node()
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    fn record(&mut self, node: usize, epoch: Epoch, kind: String, digest: String, value: Option<u64>) {
        let r = TraceRecord { seq: self.seq, tick: self.t, node, epoch, kind, digest, value };
        self.seq += 1;
        self.trace.push(serde_json::to_string(&r).expect("trace records serialise"));
    }

    /// Chooses a delivery time for one copy, clamping illegal choices.
    fn submit_send(&mut self, from: ProcessId, to: ProcessId, payload: Payload) {
        let p = &self.scenario.params;
        let t = self.t;
        let mut at = choose_delivery(self.policy, &mut self.rng, t, self.scenario.gst, p.delta, p.n, from, to, &self.byzantine);
        let honest_pair = !self.byzantine.contains(&from) && !self.byzantine.contains(&to);
        let bound = delivery_bound(t, self.scenario.gst, p.delta);
        if at <= t || (honest_pair && at > bound) || (from == to && at != t + 1) {
            self.metrics.delivery_violations.push(format!("t={t} {from}->{to}: chose {at}, bound {bound}"));
            at = if from == to { t + 1 } else { at.clamp(t + 1, bound) };
        }
        self.queue.entry(at).or_default().push(Envelope { from, to, payload });
    }

    fn dispatch(&mut self, from: ProcessId, sends: Vec<Send>) {
        let byz = self.byzantine.contains(&from);
        for s in sends {
            if let Some(m) = signed_of(&s.payload) {
                if !byz {
                    self.honest_tags.insert(m.tag);
                } else if !self.byzantine.contains(&m.signer) && !self.honest_tags.contains(&m.tag) {
                    self.metrics
                        .forgery_rejections
                        .push(format!("t={} {from} sent a {} signed by {}", self.t, s.payload.kind(), m.signer));
                    continue;
                }
            }
            if let Payload::Odd(OddMsg::Propose(p)) = &s.payload {
                let b = p.block();
                self.metrics.proposed.entry((b.epoch, b.height)).or_default().insert(b.digest());
            }
            match s.to {
                Dest::All => {
                    for j in 0..self.scenario.params.n {
                        self.submit_send(from, ProcessId(j), s.payload.clone());
                    }
                }
                Dest::One(j) if j.0 < self.scenario.params.n => self.submit_send(from, j, s.payload),
                Dest::One(_) => {}
            }
        }
    }

    fn absorb_events(&mut self, i: usize) {
        let events = std::mem::take(&mut self.procs[i].node_mut().events);
        let correct = !self.byzantine.contains(&ProcessId(i));
        let delta2 = 2 * self.scenario.params.delta;
        for (epoch, ev) in events {
            if correct {
                match &ev {
                    NodeEvent::EpochEntered { epoch } if *epoch > 0 => {
                        self.metrics.epoch_entries[i].push((*epoch, self.t));
                    }
                    NodeEvent::Even(EvenEvent::RoundStarted { round, t }) => {
                        if let Some((e, prev)) = self.last_round_start[i] {
                            if e == epoch && *t > prev + delta2 {
                                self.metrics.pacing_violations.push(format!(
                                    "{} round {round} of epoch {epoch} started {} after the previous",
                                    ProcessId(i),
                                    t - prev
                                ));
                            }
                        }
                        self.last_round_start[i] = Some((epoch, *t));
                    }
                    NodeEvent::Even(EvenEvent::Finalized { rule, .. }) => {
                        self.metrics.finalizations += 1;
                        if *rule == FinalityRule::Reported {
                            self.metrics.reported_finalizations += 1;
                        }
                    }
                    NodeEvent::Even(EvenEvent::StuckSent { round }) => {
                        let lastfinalized = self.procs[i].node().even.lastfinalized;
                        self.metrics.stuck.push(StuckRecord {
                            node: ProcessId(i),
                            epoch,
                            round: *round,
                            lastfinalized,
                            t: self.t,
                        });
                    }
                    NodeEvent::Odd(OddEvent::Notarized { h, block, dummy: false }) => {
                        self.metrics.notarized.entry((epoch, *h)).or_default().insert(*block);
                    }
                    NodeEvent::Odd(OddEvent::Concluded { fin, h }) => {
                        self.metrics.conclusions.push(Conclusion { node: ProcessId(i), epoch, t: self.t, views: *h, fin: fin.clone() });
                    }
                    NodeEvent::Dropped { .. } => self.metrics.dropped_malformed += 1,
                    _ => {}
                }
            }
            let (kind, digest, value) = event_record(&ev);
            self.record(i, epoch, kind, digest, value);
        }
    }

    /// One two-phase tick: every process steps on what is due, then all sends
    /// are scheduled.
    pub fn tick(&mut self) -> Result<()> {
        let t = self.t;
        let n = self.scenario.params.n;
        let mut inbox: Vec<Vec<(ProcessId, Payload)>> = (0..n).map(|_| Vec::new()).collect();
        let due = self.queue.remove(&t).unwrap_or_default();
        self.metrics.messages += due.len() as u64;
        for env in due {
            if self.scenario.trace_messages {
                let (kind, digest) = (format!("deliver_{}", env.payload.kind()), env.payload.digest().short());
                let epoch = self.procs[env.to.0].node().epoch;
                self.record(env.to.0, epoch, kind, digest, Some(env.from.0 as u64));
            }
            inbox[env.to.0].push((env.from, env.payload));
        }
        let mut outgoing = Vec::with_capacity(n);
        for (i, delivered) in inbox.into_iter().enumerate() {
            let before = self.procs[i].node().epoch;
            let sends = self.procs[i].step(t, delivered)?;
            let after = self.procs[i].node().epoch;
            if after < before {
                return Err(self.abort(format!("p{i} went from epoch {before} back to {after}")));
            }
            self.absorb_events(i);
            outgoing.push(sends);
        }
        for (i, sends) in outgoing.into_iter().enumerate() {
            self.dispatch(ProcessId(i), sends);
        }
        self.observe();
        self.t += 1;
        Ok(())
    }

    fn abort(&self, message: String) -> Error {
        let tail: Vec<&str> = self.trace.iter().rev().take(20).rev().map(String::as_str).collect();
        Error::Invariant { tick: self.t, message: format!("{message}\nlast trace records:\n{}", tail.join("\n")) }
    }

    fn observe(&mut self) {
        let t = self.t;
        let mut floor: Option<&ChainString> = None;
        let (mut lo, mut hi) = (Epoch::MAX, 0);
        for p in &self.metrics.correct {
            let node = self.procs[p.0].node();
            let f = node.final_value();
            let log = &mut self.metrics.finals[p.0];
            if log.last().map(|r| &r.value) != Some(f) {
                log.push(FinalRecord { t, epoch: node.epoch, value: f.clone() });
            }
            if floor.is_none_or(|x| f.len() < x.len()) {
                floor = Some(f);
            }
            lo = lo.min(node.epoch);
            hi = hi.max(node.epoch);
        }
        let floor = floor.cloned().unwrap_or_default();
        self.metrics.floor.push(floor);
        self.metrics.epoch_range.push((lo, hi));
        self.metrics.ticks = t + 1;
    }

    fn should_stop(&self) -> bool {
        let m = &self.metrics;
        let s = &self.scenario.stop;
        if let Some(e) = s.at_epoch {
            if m.epoch_range.last().is_some_and(|r| r.0 >= e) {
                return true;
            }
        }
        if let Some(b) = s.finalized_blocks {
            if m.min_final_blocks() >= b {
                return true;
            }
        }
        false
    }

    /// Runs to `horizon` timeslots or until the stop rule fires.
    pub fn run(mut self, horizon: Timeslot) -> Result<RunReport> {
        while self.t < horizon {
            self.tick()?;
            if self.should_stop() {
                break;
            }
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> RunReport {
        let consistency = check_consistency(&self.metrics);
        let claim3 = check_claim3(&self.metrics);
        let m = &self.metrics;
        let summary = Summary {
            seq: self.seq,
            kind: "summary",
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            ticks: m.ticks,
            messages: m.messages,
            max_epoch: m.max_epoch(),
            min_final_blocks: m.min_final_blocks(),
            floor_bits: m.floor.last().map_or(0, ChainString::len),
            finalizations: m.finalizations,
            conclusions: m.conclusions.len(),
            consistency_ok: consistency.ok,
            consistency_violations: consistency.violations.len(),
            claim3_checked: claim3.checked,
            claim3_violations: claim3.violations.len(),
            pacing_violations: m.pacing_violations.len(),
            delivery_violations: m.delivery_violations.len(),
            forgery_rejections: m.forgery_rejections.len(),
            double_notarizations: m.double_notarizations().len(),
            equivocations: m.equivocations().len(),
        };
        self.trace.push(serde_json::to_string(&summary).expect("summary serialises"));
        RunReport { metrics: self.metrics, consistency, claim3, summary, trace: self.trace }
    }
}

/// Builds and runs `scenario` to `horizon`.
pub fn run_until(scenario: &Scenario, horizon: Timeslot) -> Result<RunReport> {
    Simulation::new(scenario.clone())?.run(horizon)
}

/// Runs `scenario` to its own horizon.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport> {
    run_until(scenario, scenario.horizon)
}

/// The scenario embedded in a trace's header line.
pub fn scenario_from_trace(trace: &str) -> Result<Scenario> {
    #[derive(Deserialize)]
    struct Header {
        scenario: Scenario,
    }
    let first = trace.lines().next().ok_or_else(|| Error::InvalidScenario("empty trace".into()))?;
    let h: Header = serde_json::from_str(first)?;
    Ok(h.scenario)
}
