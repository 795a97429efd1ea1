//! Static Byzantine strategies and the adversary's control of delivery times.
//!
//! A Byzantine process wraps an honest [`Node`] and rewrites what it sends.
//! All Byzantine processes act as one mind: any of them may use every
//! Byzantine key, but none of them holds a correct process's key.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certs::{Body, KeyRing};
use crate::chainstr::{mint_child, BlockChain, ChainString, SharedOracle};
use crate::error::Result;
use crate::node::{Dest, Node, Payload, Send};
use crate::simplex_odd::{OddMsg, Proposal, SimplexBlock, VoteMsg};
use crate::snowman_even::{SampleRequest, SampleResponse};
use crate::types::{is_odd, Epoch, ProcessId, Timeslot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Honest,
    Crash,
    SampleLiar,
    EquivocatingLeader,
    StuckSpammer,
    PregstDelayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiarMode {
    /// Report bare genesis for chain, lock and final.
    #[default]
    Genesis,
    /// Report one of two sibling forks, chosen by the requester's id parity,
    /// with genesis as final.
    ForkSplit,
    /// As `fork_split`, but the fork is also reported as final.
    ForkFinal,
}

/// How the adversary picks delivery times for correct-to-correct traffic before GST.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryPolicy {
    /// Uniform over the legal window.
    #[default]
    Uniform,
    /// Fast inside each half of the processes, as late as allowed across halves.
    Split,
    /// As late as allowed.
    MaxDelay,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub strategy: StrategyKind,
    pub liar_mode: LiarMode,
    /// First timeslot at which crashed processes are silent.
    pub crash_at: Timeslot,
    /// Overrides the pre-GST policy; `pregst_delayer` implies `split`.
    pub delivery: Option<DeliveryPolicy>,
    /// Equivocating leaders also answer samples like `sample_liar`, so the
    /// even epochs stall and the fallback runs.
    pub lie_in_even: bool,
}

impl AdversaryConfig {
    pub fn delivery_policy(&self) -> DeliveryPolicy {
        match (self.delivery, self.strategy) {
            (Some(d), _) => d,
            (None, StrategyKind::PregstDelayer) => DeliveryPolicy::Split,
            (None, _) => DeliveryPolicy::Uniform,
        }
    }
}

/// Latest legal delivery time for correct-to-correct traffic sent at `t`.
pub fn delivery_bound(t: Timeslot, gst: Timeslot, delta: u64) -> Timeslot {
    t.max(gst) + delta
}

/// The adversary's chosen delivery time for one copy of a message.
#[allow(clippy::too_many_arguments)]
pub fn choose_delivery(
    policy: DeliveryPolicy,
    rng: &mut ChaCha8Rng,
    t: Timeslot,
    gst: Timeslot,
    delta: u64,
    n: usize,
    from: ProcessId,
    to: ProcessId,
    byzantine: &BTreeSet<ProcessId>,
) -> Timeslot {
    if from == to || byzantine.contains(&from) || byzantine.contains(&to) {
        return t + 1;
    }
    let bound = delivery_bound(t, gst, delta);
    if t >= gst {
        return rng.gen_range(t + 1..=bound);
    }
    match policy {
        DeliveryPolicy::Uniform => rng.gen_range(t + 1..=bound),
        DeliveryPolicy::MaxDelay => bound,
        DeliveryPolicy::Split => {
            if (from.0 < n / 2) == (to.0 < n / 2) {
                t + 1
            } else {
                bound
            }
        }
    }
}

/// Shared adversary knowledge handed to every Byzantine process.
#[derive(Debug, Clone)]
pub struct Coalition {
    pub members: BTreeSet<ProcessId>,
    pub ring: Arc<KeyRing>,
    pub oracle: SharedOracle,
}

#[derive(Debug)]
pub struct ByzantineNode {
    pub inner: Node,
    config: AdversaryConfig,
    coalition: Coalition,
    stuck_epochs: BTreeSet<Epoch>,
}

impl ByzantineNode {
    pub fn new(inner: Node, config: AdversaryConfig, coalition: Coalition) -> Self {
        ByzantineNode { inner, config, coalition, stuck_epochs: BTreeSet::new() }
    }

    pub fn id(&self) -> ProcessId {
        self.inner.id
    }

    pub fn strategy(&self) -> StrategyKind {
        self.config.strategy
    }

    /// One timeslot: the honest machine's sends, rewritten by the strategy.
    pub fn step(&mut self, t: Timeslot, delivered: Vec<(ProcessId, Payload)>) -> Result<Vec<Send>> {
        match self.config.strategy {
            StrategyKind::Honest | StrategyKind::PregstDelayer => self.inner.step(t, delivered),
            StrategyKind::Crash => {
                let out = self.inner.step(t, delivered)?;
                Ok(if t >= self.config.crash_at { Vec::new() } else { out })
            }
            StrategyKind::SampleLiar => self.lie(t, delivered),
            StrategyKind::EquivocatingLeader => {
                let out = if self.config.lie_in_even { self.lie(t, delivered)? } else { self.inner.step(t, delivered)? };
                self.equivocate(out)
            }
            StrategyKind::StuckSpammer => {
                let mut out = self.inner.step(t, delivered)?;
                let e = self.inner.epoch;
                if !is_odd(e) && self.stuck_epochs.insert(e) {
                    let sigma = self.inner.final_value().clone();
                    let m = self.inner.key().sign(Body::Stuck { epoch: e, sigma });
                    out.push(Send { to: Dest::All, payload: Payload::Stuck(m) });
                }
                Ok(out)
            }
        }
    }

    fn lie(&mut self, t: Timeslot, delivered: Vec<(ProcessId, Payload)>) -> Result<Vec<Send>> {
        let requests: Vec<(ProcessId, SampleRequest)> = delivered
            .iter()
            .filter_map(|(from, p)| match p {
                Payload::SampleRequest(r) => Some((*from, *r)),
                _ => None,
            })
            .collect();
        let mut out: Vec<Send> = self
            .inner
            .step(t, delivered)?
            .into_iter()
            .filter(|s| !matches!(s.payload, Payload::SampleResponse(_)))
            .collect();
        for (from, req) in requests {
            let resp = self.fabricate(from, req)?;
            out.push(Send { to: Dest::One(from), payload: Payload::SampleResponse(Arc::new(resp)) });
        }
        Ok(out)
    }

    fn fabricate(&mut self, to: ProcessId, req: SampleRequest) -> Result<SampleResponse> {
        let final_ = self.inner.final_value().clone();
        let store = &mut self.inner.store;
        let genesis = store.genesis().clone();
        let g = genesis.hash().to_chain_string();
        let (chain, lock) = match self.config.liar_mode {
            LiarMode::Genesis => (Arc::new(BlockChain::new(vec![genesis.clone()], genesis.hash())), g.clone()),
            LiarMode::ForkSplit | LiarMode::ForkFinal => {
                let base = store.resolve(&final_).last;
                let lead = *self.coalition.members.first().expect("coalition is non-empty");
                let side = (to.0 % 2) as u64;
                let fork = mint_child(&self.coalition.oracle, &base, lead, u64::MAX - side, vec![b"fork".to_vec()])?;
                store.insert(fork.clone());
                let chain = store.chain_to(fork.hash()).expect("fork was stored");
                let lock = chain.hashes().clone();
                (chain, lock)
            }
        };
        let fin = if self.config.liar_mode == LiarMode::ForkFinal { lock.clone() } else { g };
        Ok(SampleResponse { round: req.round, epoch: req.epoch, chain, lock, fin })
    }

    /// Replaces this process's proposals with two conflicting ones, one per
    /// half, and has every coalition member vote for both.
    fn equivocate(&mut self, out: Vec<Send>) -> Result<Vec<Send>> {
        let n = self.coalition.ring.n();
        let mut rewritten = Vec::with_capacity(out.len());
        for s in out {
            let Payload::Odd(OddMsg::Propose(p)) = &s.payload else {
                rewritten.push(s);
                continue;
            };
            if p.signed.signer != self.id() {
                rewritten.push(s);
                continue;
            }
            let a = p.clone();
            let b = Arc::new(self.twin(p));
            for j in 0..n {
                let which = if j < n / 2 { &a } else { &b };
                rewritten.push(Send { to: Dest::One(ProcessId(j)), payload: Payload::Odd(OddMsg::Propose(which.clone())) });
            }
            for prop in [&a, &b] {
                let blk = prop.block();
                for m in &self.coalition.members {
                    let key = self.coalition.ring.key(*m);
                    let signed = key.sign(Body::Vote { epoch: blk.epoch, height: blk.height, block: blk.digest() });
                    let v = Arc::new(VoteMsg { signed, block: blk.clone() });
                    rewritten.push(Send { to: Dest::All, payload: Payload::Odd(OddMsg::Vote(v)) });
                }
            }
        }
        Ok(rewritten)
    }

    fn twin(&self, p: &Proposal) -> Proposal {
        let blk = p.block();
        let body = blk.body.as_ref().expect("proposals carry non-dummy blocks");
        let other = SimplexBlock::new(blk.epoch, blk.height, body.parent, vec![b"equivocation".to_vec()], body.sc.clone());
        let mut blocks = p.blocks.clone();
        *blocks.last_mut().unwrap() = Arc::new(other);
        Proposal::new(self.inner.key(), blocks, p.notarizations.clone())
    }

    pub fn final_value(&self) -> &ChainString {
        self.inner.final_value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainstr::{HashBackend, HashOracle};
    use crate::params::ProtocolParams;
    use crate::snowman_even::MintPolicy;
    use rand::SeedableRng;

    fn setup(strategy: StrategyKind, liar_mode: LiarMode) -> (ByzantineNode, Node) {
        let params = ProtocolParams { n: 10, f: 1, ..Default::default() };
        let ring = KeyRing::new(10, 4);
        let oracle = HashOracle::shared(HashBackend::Oracle, 32, 4).unwrap();
        let mk = |i| Node::new(ProcessId(i), params.clone(), ring.clone(), oracle.clone(), MintPolicy::default(), 1).unwrap();
        let coalition = Coalition { members: [ProcessId(9)].into(), ring: ring.clone(), oracle: oracle.clone() };
        let cfg = AdversaryConfig { strategy, liar_mode, ..Default::default() };
        (ByzantineNode::new(mk(9), cfg, coalition), mk(0))
    }

    #[test]
    fn delivery_respects_the_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let byz: BTreeSet<ProcessId> = [ProcessId(9)].into();
        for t in 0..50 {
            for policy in [DeliveryPolicy::Uniform, DeliveryPolicy::Split, DeliveryPolicy::MaxDelay] {
                let d = choose_delivery(policy, &mut rng, t, 20, 2, 10, ProcessId(1), ProcessId(7), &byz);
                assert!(d > t && d <= delivery_bound(t, 20, 2));
                if t >= 20 {
                    assert!(d <= t + 2);
                }
            }
            assert_eq!(choose_delivery(DeliveryPolicy::MaxDelay, &mut rng, t, 20, 2, 10, ProcessId(1), ProcessId(1), &byz), t + 1);
        }
        assert_eq!(choose_delivery(DeliveryPolicy::Split, &mut rng, 3, 20, 1, 10, ProcessId(1), ProcessId(2), &byz), 4);
        assert_eq!(choose_delivery(DeliveryPolicy::Split, &mut rng, 3, 20, 1, 10, ProcessId(1), ProcessId(7), &byz), 21);
    }

    #[test]
    fn genesis_liar_reports_genesis() {
        let (mut b, honest) = setup(StrategyKind::SampleLiar, LiarMode::Genesis);
        let req = SampleRequest { round: 4, epoch: 0 };
        let out = b.step(0, vec![(ProcessId(0), Payload::SampleRequest(req))]).unwrap();
        let resps: Vec<&SampleResponse> = out
            .iter()
            .filter_map(|s| match &s.payload {
                Payload::SampleResponse(r) => Some(r.as_ref()),
                _ => None,
            })
            .collect();
        assert_eq!(resps.len(), 1);
        let g = honest.final_value();
        assert_eq!(&resps[0].lock, g);
        assert_eq!(&resps[0].fin, g);
        assert_eq!(resps[0].round, 4);
        assert!(resps[0].chain.is_chain());
    }

    #[test]
    fn fork_split_liar_tells_each_parity_a_different_fork() {
        let (mut b, _) = setup(StrategyKind::SampleLiar, LiarMode::ForkSplit);
        let req = SampleRequest { round: 0, epoch: 0 };
        let out = b
            .step(0, vec![(ProcessId(0), Payload::SampleRequest(req)), (ProcessId(1), Payload::SampleRequest(req)), (ProcessId(2), Payload::SampleRequest(req))])
            .unwrap();
        let locks: Vec<ChainString> = out
            .iter()
            .filter_map(|s| match &s.payload {
                Payload::SampleResponse(r) => Some(r.lock.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(locks.len(), 3);
        assert_eq!(locks[0], locks[2]);
        assert_ne!(locks[0], locks[1]);
        assert_eq!(locks[0].len(), 64);
    }

    #[test]
    fn spammer_sends_one_stuck_per_even_epoch() {
        let (mut b, _) = setup(StrategyKind::StuckSpammer, LiarMode::Genesis);
        let count = |out: &[Send]| out.iter().filter(|s| matches!(s.payload, Payload::Stuck(_))).count();
        assert_eq!(count(&b.step(0, vec![]).unwrap()), 1);
        assert_eq!(count(&b.step(1, vec![]).unwrap()), 0);
    }

    #[test]
    fn crashed_process_is_silent() {
        let (mut b, _) = setup(StrategyKind::Crash, LiarMode::Genesis);
        assert!(b.step(0, vec![]).unwrap().is_empty());
    }
}
