//! The even-epoch state machine: sampling rounds, preference and lock updates,
//! the two finality rules, stuck detection and sample answering.
//!
//! Per-round sample data is summarised as it arrives. For a threshold `a > k/2`
//! the set `{σ : at least a of the k reports extend σ}` is the prefix set of a
//! single string (its "frontier"), so each count against `α₂` reduces to one
//! prefix test. Locks, `val` and lock bounds are kept only for strings strictly
//! longer than `final`; shorter ones never influence the machine again.

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chainstr::{hash_bit, mint_child, threshold_frontier_weighted, BlockChain, BlockStore, ChainString, SharedOracle};
use crate::error::Result;
use crate::params::ProtocolParams;
use crate::types::{Epoch, ProcessId, Round, Timeslot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct SampleRequest {
    pub round: Round,
    pub epoch: Epoch,
}

/// `(s′, B, σ, σ′, e)`: the responder's `chain(pref)`, aged lock and final.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleResponse {
    pub round: Round,
    pub epoch: Epoch,
    pub chain: Arc<BlockChain>,
    pub lock: ChainString,
    pub fin: ChainString,
}

/// When a process may create a block so that `E` is not empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MintPolicy {
    pub enabled: bool,
    /// Blocks on `chain(pref)` beyond `chain(final)` before minting pauses.
    pub max_pending: u64,
    /// Rounds the tip must stay unchanged before any process may mint on it.
    pub patience: u64,
}

impl Default for MintPolicy {
    fn default() -> Self {
        MintPolicy { enabled: true, max_pending: 4, patience: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalityRule {
    /// `β` consecutive rounds of `suppfin`.
    Support,
    /// Two consecutive rounds with `α₃` reported finals.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvenEvent {
    RoundStarted { round: Round, t: Timeslot },
    Finalized { sigma: ChainString, from_round: Round, rule: FinalityRule },
    Minted { height: u64 },
    StuckSent { round: Round },
}

#[derive(Debug, Clone)]
pub enum EvenOut {
    Request { to: ProcessId, req: SampleRequest },
    Response { to: ProcessId, resp: Arc<SampleResponse> },
    Stuck { sigma: ChainString },
}

/// A recorded response, shared by every slot its sender occupies.
#[derive(Debug)]
struct Report {
    pref: ChainString,
    lock: ChainString,
    fin: ChainString,
}

#[derive(Debug, Default)]
struct Slots {
    report: Vec<Option<Arc<Report>>>,
    by_sender: HashMap<ProcessId, Vec<usize>>,
    defined: usize,
}

#[derive(Debug)]
struct RoundData {
    start: Timeslot,
    /// Present while responses for this round can still be recorded.
    slots: Option<Slots>,
    dirty: bool,
    /// Frontier of `rpref` at `α₂`.
    top_pref: Option<ChainString>,
    /// Frontier of `rlock` at `α₂`.
    top_lock: Option<ChainString>,
    /// Frontier of `rfin` at `α₃`.
    fin_front: Vec<ChainString>,
    /// Maximal strings with `suppfin(σ, s, e) = 1`.
    suppfin: Vec<ChainString>,
}

impl RoundData {
    fn refresh(&mut self, p: &ProtocolParams) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        let Some(slots) = &self.slots else { return };
        let reports: Vec<(&Report, usize)> = slots
            .by_sender
            .values()
            .filter_map(|js| {
                let filled = js.iter().filter(|&&j| slots.report[j].is_some()).count();
                slots.report[js[0]].as_deref().map(|r| (r, filled))
            })
            .collect();
        let one = |v: Vec<ChainString>| v.into_iter().next();
        self.top_pref = one(threshold_frontier_weighted(reports.iter().map(|(r, w)| (&r.pref, *w)), p.alpha2));
        self.top_lock = one(threshold_frontier_weighted(reports.iter().map(|(r, w)| (&r.lock, *w)), p.alpha2));
        self.fin_front = threshold_frontier_weighted(reports.iter().map(|(r, w)| (&r.fin, *w)), p.alpha3);
    }

    /// Responses grouped by sender, with the number of slots each fills.
    fn groups(&self) -> Vec<(Arc<Report>, usize)> {
        let Some(slots) = &self.slots else { return Vec::new() };
        slots
            .by_sender
            .values()
            .filter_map(|js| slots.report[js[0]].as_ref().map(|r| (r.clone(), js.len())))
            .collect()
    }
}

/// Per-string state for strings extending `base`, stored as a binary trie so
/// walking along `pref` costs one step per bit.
#[derive(Debug, Clone, Default)]
struct TrieNode {
    child: [u32; 2],
    val: Option<bool>,
    locktime: Option<Timeslot>,
    lockbound: Round,
    lock_checked: Round,
    // Generation of `dec` that marked this string.
    dec: u64,
}

#[derive(Debug, Clone)]
struct PrefixTrie {
    base: ChainString,
    nodes: Vec<TrieNode>,
    dec_gen: u64,
}

const ROOT: u32 = 0;

impl PrefixTrie {
    fn new(base: &ChainString) -> Self {
        PrefixTrie { base: base.clone(), nodes: vec![TrieNode::default()], dec_gen: 1 }
    }

    fn node(&self, i: u32) -> &TrieNode {
        &self.nodes[i as usize]
    }

    fn node_mut(&mut self, i: u32) -> &mut TrieNode {
        &mut self.nodes[i as usize]
    }

    fn child(&self, i: u32, bit: bool) -> Option<u32> {
        match self.nodes[i as usize].child[bit as usize] {
            ROOT => None,
            c => Some(c),
        }
    }

    fn child_or_insert(&mut self, i: u32, bit: bool) -> u32 {
        if let Some(c) = self.child(i, bit) {
            return c;
        }
        let c = self.nodes.len() as u32;
        self.nodes.push(TrieNode::default());
        self.nodes[i as usize].child[bit as usize] = c;
        c
    }

    fn find(&self, sigma: &ChainString) -> Option<u32> {
        if !sigma.starts_with(&self.base) {
            return None;
        }
        (self.base.len()..sigma.len()).try_fold(ROOT, |i, l| self.child(i, sigma.bit(l)))
    }

    fn find_or_insert(&mut self, sigma: &ChainString) -> Option<u32> {
        if !sigma.starts_with(&self.base) {
            return None;
        }
        Some((self.base.len()..sigma.len()).fold(ROOT, |i, l| self.child_or_insert(i, sigma.bit(l))))
    }

    fn is_dec(&self, i: u32) -> bool {
        self.node(i).dec == self.dec_gen
    }

    fn mark_dec(&mut self, i: u32, bit: bool) {
        let c = self.child_or_insert(i, bit);
        let g = self.dec_gen;
        self.node_mut(c).dec = g;
    }

    fn clear_dec(&mut self) {
        self.dec_gen += 1;
    }

    /// Drops the locks of every proper extension of node `i`.
    fn clear_locks_below(&mut self, i: u32) {
        let mut stack: Vec<u32> = self.node(i).child.iter().copied().filter(|&c| c != ROOT).collect();
        while let Some(j) = stack.pop() {
            let n = self.node_mut(j);
            n.locktime = None;
            stack.extend(n.child.iter().copied().filter(|&c| c != ROOT));
        }
    }

    /// Keeps only strings extending `base`, whose own locks are dropped.
    fn reroot(&mut self, base: &ChainString) {
        if *base == self.base {
            let root = self.node_mut(ROOT);
            root.locktime = None;
            root.lockbound = 0;
            root.lock_checked = 0;
            return;
        }
        let mut fresh = PrefixTrie { base: base.clone(), nodes: vec![TrieNode::default()], dec_gen: self.dec_gen };
        if base.starts_with(&self.base) {
            if let Some(old) = self.find(base) {
                fresh.nodes[0] = TrieNode { child: [ROOT; 2], ..self.node(old).clone() };
                let mut stack = vec![(old, ROOT)];
                while let Some((o, n)) = stack.pop() {
                    for bit in [false, true] {
                        if let Some(oc) = self.child(o, bit) {
                            let nc = fresh.child_or_insert(n, bit);
                            fresh.nodes[nc as usize] = TrieNode { child: [ROOT; 2], ..self.node(oc).clone() };
                            stack.push((oc, nc));
                        }
                    }
                }
            }
        } else if self.base.starts_with(base) {
            let at = fresh.find_or_insert(&self.base).expect("old base extends the new one");
            let mut stack = vec![(ROOT, at)];
            while let Some((o, n)) = stack.pop() {
                let children = fresh.node(n).child;
                fresh.nodes[n as usize] = TrieNode { child: children, ..self.node(o).clone() };
                for bit in [false, true] {
                    if let Some(oc) = self.child(o, bit) {
                        let nc = fresh.child_or_insert(n, bit);
                        stack.push((oc, nc));
                    }
                }
            }
        }
        let root = fresh.node_mut(ROOT);
        root.locktime = None;
        root.lockbound = 0;
        root.lock_checked = 0;
        *self = fresh;
    }
}

/// Sample groups whose reported string still agrees with the walk.
///
/// While the walk follows `guide` the counts come from each group's common
/// prefix with the guide, so a step costs O(1) amortized. Once the walk leaves
/// the guide it falls back to filtering an explicit list.
struct Survivors<'a> {
    strs: Vec<(&'a ChainString, usize)>,
    guide: Option<&'a ChainString>,
    // (lcp with guide, index) sorted by lcp; entries before `lo` are dead and
    // entries from `hi` on agree with the guide past the current bit.
    by_lcp: Vec<(usize, usize)>,
    suffix_weight: Vec<usize>,
    lo: usize,
    hi: usize,
    alive: Vec<usize>,
}

impl<'a> Survivors<'a> {
    fn new(strs: Vec<(&'a ChainString, usize)>, guide: &'a ChainString, base: &ChainString) -> Self {
        if guide.starts_with(base) {
            let mut by_lcp: Vec<(usize, usize)> = strs.iter().enumerate().map(|(i, (s, _))| (s.lcp(guide), i)).collect();
            by_lcp.sort_unstable();
            let mut suffix_weight = vec![0; by_lcp.len() + 1];
            for j in (0..by_lcp.len()).rev() {
                suffix_weight[j] = suffix_weight[j + 1] + strs[by_lcp[j].1].1;
            }
            Self { strs, guide: Some(guide), by_lcp, suffix_weight, lo: 0, hi: 0, alive: Vec::new() }
        } else {
            let alive = (0..strs.len()).filter(|&i| strs[i].0.starts_with(base)).collect();
            Self { strs, guide: None, by_lcp: Vec::new(), suffix_weight: Vec::new(), lo: 0, hi: 0, alive }
        }
    }

    fn leave_guide(&mut self, keep: impl Fn(usize, &ChainString) -> bool) {
        self.alive = self.by_lcp[self.lo..].iter().filter(|&&(l, i)| keep(l, self.strs[i].0)).map(|&(_, i)| i).collect();
        self.guide = None;
    }

    /// Prepares for reading bit `pos`, the walk agreeing with every survivor below it.
    fn at(&mut self, pos: usize) {
        let Some(g) = self.guide else { return };
        while self.lo < self.by_lcp.len() && self.by_lcp[self.lo].0 < pos {
            self.lo += 1;
        }
        self.hi = self.hi.max(self.lo);
        while self.hi < self.by_lcp.len() && self.by_lcp[self.hi].0 <= pos {
            self.hi += 1;
        }
        if pos >= g.len() {
            self.leave_guide(|_, _| true);
        }
    }

    /// Weight of survivors whose bit `pos` equals `bit`.
    fn count(&self, pos: usize, bit: bool) -> usize {
        match self.guide {
            Some(g) if bit == g.bit(pos) => self.suffix_weight[self.hi],
            Some(_) => self.by_lcp[self.lo..self.hi]
                .iter()
                .filter(|&&(_, i)| self.strs[i].0.len() > pos)
                .map(|&(_, i)| self.strs[i].1)
                .sum(),
            None => self
                .alive
                .iter()
                .map(|&i| self.strs[i])
                .filter(|(s, _)| s.len() > pos && s.bit(pos) == bit)
                .map(|(_, w)| w)
                .sum(),
        }
    }

    /// Drops survivors that disagree with the walk's bit `pos`.
    fn advance(&mut self, pos: usize, v: bool) {
        match self.guide {
            Some(g) => {
                if v != g.bit(pos) {
                    self.leave_guide(|l, s| l == pos && s.len() > pos);
                }
            }
            None => {
                let strs = &self.strs;
                self.alive.retain(|&i| {
                    let s = strs[i].0;
                    s.len() > pos && s.bit(pos) == v
                });
            }
        }
    }
}

fn add_mark(marks: &mut Vec<ChainString>, m: ChainString) {
    if marks.iter().any(|x| x.starts_with(&m)) {
        return;
    }
    marks.retain(|x| !m.starts_with(x));
    marks.push(m);
}

/// Everything a process needs from its surroundings during an even-epoch step.
pub struct EvenCtx<'a> {
    pub id: ProcessId,
    pub params: &'a ProtocolParams,
    pub store: &'a mut BlockStore,
    pub rng: &'a mut ChaCha8Rng,
    pub oracle: &'a SharedOracle,
    pub mint: &'a MintPolicy,
    pub t: Timeslot,
}

#[derive(Debug)]
pub struct EvenEpochState {
    pub epoch: Epoch,
    ready: bool,
    pub s: Round,
    newround: bool,
    pub pref: ChainString,
    pub final_: ChainString,
    pref_hist: Vec<ChainString>,
    /// `since[i]`: first round of the unbroken run of `pref_hist` values that
    /// all extend `pref_hist(s-1)[..hist_base + 1 + i]`.
    since: Vec<Round>,
    hist_base: usize,
    /// `val`, `locktime`, `lockbound` and `dec`, for strings extending `final`.
    trie: PrefixTrie,
    rounds: Vec<RoundData>,
    pub lastfinalized: Round,
    answered: HashSet<(ProcessId, Round)>,
    stuck_round: Option<Round>,
    mint_counter: u64,
    tip: Option<(crate::chainstr::HashValue, Round)>,
    final_res_cache: Option<(usize, usize, crate::chainstr::Resolution)>,
    answer_cache: Option<(Timeslot, Arc<BlockChain>, ChainString)>,
    pub events: Vec<EvenEvent>,
}

impl EvenEpochState {
    pub fn new(genesis: &ChainString) -> Self {
        EvenEpochState {
            epoch: 0,
            ready: false,
            s: 0,
            newround: true,
            pref: genesis.clone(),
            final_: genesis.clone(),
            pref_hist: Vec::new(),
            since: Vec::new(),
            hist_base: 0,
            trie: PrefixTrie::new(genesis),
            rounds: Vec::new(),
            lastfinalized: 0,
            answered: HashSet::default(),
            stuck_round: None,
            mint_counter: 0,
            tip: None,
            final_res_cache: None,
            answer_cache: None,
            events: Vec::new(),
        }
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn is_locked(&self, sigma: &ChainString) -> bool {
        self.locktime(sigma).is_some()
    }

    pub fn locktime(&self, sigma: &ChainString) -> Option<Timeslot> {
        self.trie.find(sigma).and_then(|i| self.trie.node(i).locktime)
    }

    pub fn lockbound(&self, sigma: &ChainString) -> Round {
        self.trie.find(sigma).map_or(0, |i| self.trie.node(i).lockbound)
    }

    pub fn val(&self, sigma: &ChainString) -> Option<bool> {
        self.trie.find(sigma).and_then(|i| self.trie.node(i).val)
    }

    pub fn pref_hist(&self, s: Round) -> Option<&ChainString> {
        self.pref_hist.get(s as usize)
    }

    pub fn start(&self, s: Round) -> Option<Timeslot> {
        self.rounds.get(s as usize).map(|r| r.start)
    }

    pub fn suppfin(&self, sigma: &ChainString, s: Round) -> bool {
        self.rounds
            .get(s as usize)
            .is_some_and(|r| r.suppfin.iter().any(|m| m.starts_with(sigma)))
    }

    pub fn dec(&self, sigma: &ChainString) -> bool {
        self.trie.find(sigma).is_some_and(|i| self.trie.is_dec(i))
    }

    /// `Init(e)`. Returns false, changing nothing, if `e` was already initialised.
    pub fn init_epoch(&mut self, e: Epoch) -> bool {
        if self.ready && self.epoch == e {
            return false;
        }
        debug_assert!(e % 2 == 0);
        self.epoch = e;
        self.ready = true;
        self.pref = self.final_.clone();
        self.s = 0;
        self.newround = true;
        self.trie = PrefixTrie::new(&self.final_);
        self.rounds.clear();
        self.pref_hist.clear();
        self.since.clear();
        self.hist_base = self.final_.len();
        self.lastfinalized = 0;
        self.answered.clear();
        self.stuck_round = None;
        self.tip = None;
        self.final_res_cache = None;
        self.answer_cache = None;
        true
    }

    /// Marks the machine inactive so the next even epoch re-initialises it.
    pub fn leave_epoch(&mut self) {
        self.ready = false;
        self.rounds.clear();
        self.trie = PrefixTrie::new(&self.final_);
    }
}

impl EvenEpochState {
    /// Forms the round's sample and asks every sampled process (duplicates included).
    pub fn begin_round(&mut self, ctx: &mut EvenCtx<'_>) -> Vec<EvenOut> {
        if !self.newround {
            return Vec::new();
        }
        let p = ctx.params;
        let sample: Vec<ProcessId> = (0..p.k).map(|_| ProcessId(ctx.rng.gen_range(0..p.n))).collect();
        self.begin_round_with(ctx, sample)
    }

    /// [`begin_round`](Self::begin_round) with a given sample sequence.
    pub fn begin_round_with(&mut self, ctx: &EvenCtx<'_>, sample: Vec<ProcessId>) -> Vec<EvenOut> {
        if !self.newround {
            return Vec::new();
        }
        let p = ctx.params;
        let mut by_sender: HashMap<ProcessId, Vec<usize>> = HashMap::default();
        for (j, q) in sample.iter().enumerate() {
            by_sender.entry(*q).or_default().push(j);
        }
        debug_assert_eq!(self.rounds.len() as u64, self.s);
        self.rounds.push(RoundData {
            start: ctx.t,
            slots: Some(Slots { report: vec![None; p.k], by_sender, defined: 0 }),
            dirty: false,
            top_pref: None,
            top_lock: None,
            fin_front: Vec::new(),
            suppfin: Vec::new(),
        });
        self.newround = false;
        self.trie.clear_dec();
        self.events.push(EvenEvent::RoundStarted { round: self.s, t: ctx.t });
        let req = SampleRequest { round: self.s, epoch: self.epoch };
        sample.into_iter().map(|to| EvenOut::Request { to, req }).collect()
    }

    /// Records a response for every unfilled slot held by `from`. Returns
    /// whether anything was recorded.
    pub fn ingest_response(&mut self, ctx: &mut EvenCtx<'_>, from: ProcessId, resp: &SampleResponse) -> bool {
        if resp.chain.is_chain() {
            ctx.store.insert_chain(&resp.chain);
        }
        if resp.epoch != self.epoch || !self.ready {
            return false;
        }
        let delta2 = 2 * ctx.params.delta;
        let Some(rd) = self.rounds.get_mut(resp.round as usize) else { return false };
        if !(ctx.t > rd.start && rd.start + delta2 >= ctx.t) {
            return false;
        }
        let hb = resp.chain.hashes();
        if hb.is_empty() || !hb.starts_with(&resp.lock) || !hb.starts_with(&resp.fin) {
            return false;
        }
        let Some(slots) = rd.slots.as_mut() else { return false };
        let Some(js) = slots.by_sender.get(&from) else { return false };
        let report = Arc::new(Report { pref: hb.clone(), lock: resp.lock.clone(), fin: resp.fin.clone() });
        let mut filled = 0;
        for &j in js {
            if slots.report[j].is_none() {
                slots.report[j] = Some(report.clone());
                filled += 1;
            }
        }
        slots.defined += filled;
        if filled > 0 {
            rd.dirty = true;
        }
        filled > 0
    }

    /// The `suppfin` update for every round whose response window contains `t`.
    pub fn window_pass(&mut self, ctx: &EvenCtx<'_>) {
        let delta2 = 2 * ctx.params.delta;
        for rd in self.rounds.iter_mut().rev() {
            if rd.start + delta2 < ctx.t {
                break;
            }
            if rd.start >= ctx.t {
                continue;
            }
            rd.refresh(ctx.params);
            if let Some(top) = &rd.top_lock {
                let m = self.pref.prefix(self.pref.lcp(top));
                add_mark(&mut rd.suppfin, m);
            }
        }
    }

    /// First round of the unbroken history run supporting `pref[..l]`.
    fn history_start(&self, l: usize) -> Round {
        if self.s == 0 {
            return 0;
        }
        let last = &self.pref_hist[self.s as usize - 1];
        if l > self.pref.lcp(last) || l <= self.hist_base {
            return self.s;
        }
        self.since[l - self.hist_base - 1]
    }

    pub fn update_locks(&mut self, ctx: &EvenCtx<'_>) {
        let p = ctx.params;
        let t = ctx.t;
        self.trie.reroot(&self.final_);
        let mut tops: HashMap<Round, usize> = HashMap::default();
        let mut node = ROOT;
        for l in self.final_.len() + 1..=self.pref.len() {
            node = self.trie.child_or_insert(node, self.pref.bit(l - 1));
            let here = self.trie.node(node);
            if here.locktime.is_some() {
                continue;
            }
            let checked = here.lock_checked;
            let lo = here.lockbound.max(self.history_start(l)).max(checked);
            let mut new_checked = checked;
            let mut locked = false;
            for r in lo..=self.s {
                let Some(rd) = self.rounds.get(r as usize) else { break };
                let top = *tops
                    .entry(r)
                    .or_insert_with(|| rd.top_pref.as_ref().map_or(0, |x| x.lcp(&self.pref)));
                if top >= l {
                    let n = self.trie.node_mut(node);
                    n.locktime = Some(t);
                    n.lockbound = r + 1;
                    locked = true;
                    break;
                }
                if rd.start + 2 * p.delta <= t && r == new_checked.max(lo) {
                    new_checked = r + 1;
                }
            }
            let n = self.trie.node_mut(node);
            if locked {
                n.lock_checked = 0;
            } else if new_checked > checked {
                n.lock_checked = new_checked;
            }
        }
    }

    fn final_resolution(&mut self, store: &BlockStore) -> crate::chainstr::Resolution {
        if let Some((len, slen, r)) = &self.final_res_cache {
            if *len == self.final_.len() && *slen == store.len() {
                return r.clone();
            }
        }
        let r = store.resolve(&self.final_);
        self.final_res_cache = Some((self.final_.len(), store.len(), r.clone()));
        r
    }

    /// Whether this process should mint a child of `last` now.
    fn should_mint(&mut self, ctx: &EvenCtx<'_>, last: &crate::chainstr::Block, final_height: u64) -> bool {
        let m = ctx.mint;
        if !m.enabled || last.height().saturating_sub(final_height) >= m.max_pending {
            return false;
        }
        let since = match self.tip {
            Some((h, r)) if h == last.hash() => r,
            _ => {
                self.tip = Some((last.hash(), self.s));
                self.s
            }
        };
        (last.height() + 1) % ctx.params.n as u64 == ctx.id.0 as u64 || self.s - since >= m.patience
    }

    /// The preference walk from `final`. Returns whether `dec(s, σ, e)` holds
    /// for every `σ` with `final ⊂ σ ⊆ pref`.
    pub fn update_pref(&mut self, ctx: &mut EvenCtx<'_>) -> Result<bool> {
        let p = ctx.params;
        let k = p.k;
        let bits = ctx.store.hash_bits() as usize;
        let (groups, total) = match self.rounds.get(self.s as usize) {
            Some(rd) => {
                let g = rd.groups();
                let total = g.iter().map(|(_, w)| w).sum::<usize>();
                (g, total)
            }
            None => (Vec::new(), 0),
        };
        let guide = self.pref.clone();
        let mut alive_pref = Survivors::new(groups.iter().map(|(r, w)| (&r.pref, *w)).collect(), &guide, &self.final_);
        let mut alive_lock = Survivors::new(groups.iter().map(|(r, w)| (&r.lock, *w)).collect(), &guide, &self.final_);

        self.trie.reroot(&self.final_);
        let mut node = ROOT;
        let mut pref = self.final_.clone();
        pref.reserve(self.pref.len().saturating_sub(pref.len()) + 2 * bits);
        let mut res = self.final_resolution(ctx.store);
        let final_height = res.last.height();
        let mut all_dec = true;
        let mut e = ctx.store.children_extending_from(&pref, &res);
        loop {
            if e.is_empty() {
                if !(res.matched && pref.len() == res.reduct_len && self.should_mint(ctx, &res.last, final_height)) {
                    break;
                }
                let payload = vec![format!("tx:{}:{}", ctx.id.0, self.mint_counter).into_bytes()];
                let b = mint_child(ctx.oracle, &res.last, ctx.id, self.mint_counter, payload)?;
                self.mint_counter += 1;
                self.events.push(EvenEvent::Minted { height: b.height() });
                ctx.store.insert(b);
                e = ctx.store.children_extending_from(&pref, &res);
                debug_assert!(!e.is_empty());
            }
            let pos = pref.len();
            let mut v = match self.trie.node(node).val {
                Some(v) => v,
                None => {
                    let v = hash_bit(e[0].hash(), pos - res.reduct_len);
                    self.trie.node_mut(node).val = Some(v);
                    v
                }
            };
            let trie = &self.trie;
            let locked = |v: bool| trie.child(node, v).is_some_and(|c| trie.node(c).locktime.is_some());
            alive_pref.at(pos);
            alive_lock.at(pos);
            if !locked(v) {
                let opp = alive_pref.count(pos, !v);
                if total - opp >= k - p.alpha1 + 1 {
                    self.trie.mark_dec(node, v);
                }
                if opp >= p.alpha1 {
                    v = !v;
                    self.trie.node_mut(node).val = Some(v);
                    self.trie.mark_dec(node, v);
                }
            }
            let trie = &self.trie;
            let locked = |v: bool| trie.child(node, v).is_some_and(|c| trie.node(c).locktime.is_some());
            if locked(v) {
                let opp = alive_lock.count(pos, !v);
                if total - opp >= k - p.alpha2 + 1 {
                    self.trie.mark_dec(node, v);
                }
                if opp >= p.alpha2 {
                    v = !v;
                    self.trie.node_mut(node).val = Some(v);
                    self.trie.mark_dec(node, v);
                    self.trie.clear_locks_below(node);
                }
            }
            pref.push(v);
            node = self.trie.child_or_insert(node, v);
            all_dec &= self.trie.is_dec(node);
            alive_pref.advance(pos, v);
            alive_lock.advance(pos, v);
            let tail = pos - res.reduct_len;
            e.retain(|c| hash_bit(c.hash(), tail) == v);
            if pref.len() == res.reduct_len + bits {
                if let Some(c) = e.iter().find(|c| pref.suffix_from(res.reduct_len) == c.hash().to_chain_string()) {
                    res = crate::chainstr::Resolution { last: c.clone(), reduct_len: pref.len(), matched: true };
                }
                e = ctx.store.children_extending_from(&pref, &res);
            }
        }
        self.pref = pref;
        Ok(all_dec)
    }

    /// Ends round `s` on timeout or when every new bit of `pref` is decided.
    pub fn advance_round_if_ready(&mut self, ctx: &EvenCtx<'_>, all_dec: bool) -> bool {
        let Some(rd) = self.rounds.get(self.s as usize) else { return false };
        if !(rd.start + 2 * ctx.params.delta <= ctx.t || all_dec) {
            return false;
        }
        let new_base = self.final_.len();
        let mut since = Vec::with_capacity(self.pref.len().saturating_sub(new_base));
        let c = if self.s > 0 { self.pref.lcp(&self.pref_hist[self.s as usize - 1]) } else { 0 };
        for l in new_base + 1..=self.pref.len() {
            if self.s > 0 && l <= c && l > self.hist_base {
                since.push(self.since[l - self.hist_base - 1]);
            } else {
                since.push(self.s);
            }
        }
        self.since = since;
        self.hist_base = new_base;
        self.pref_hist.push(self.pref.clone());
        self.s += 1;
        self.newround = true;
        true
    }

    /// Both finality rules. Returns the new `final` if it changed.
    pub fn finalize_check(&mut self, ctx: &EvenCtx<'_>) -> Option<ChainString> {
        let p = ctx.params;
        let flen = self.final_.len();
        let mut best: Option<(usize, Round, FinalityRule)> = None;
        let mut consider = |len: usize, s0: Round, rule| {
            if len > flen && best.is_none_or(|(l, s, _)| (len, s0) > (l, s)) {
                best = Some((len, s0, rule));
            }
        };

        // (i): suppfin over β consecutive rounds.
        let mut support: Vec<usize> = Vec::new();
        for rd in self.rounds.iter().rev() {
            let m = rd.suppfin.iter().map(|x| x.lcp(&self.pref)).max().unwrap_or(0);
            if m <= flen {
                break;
            }
            support.push(m);
        }
        support.reverse();
        let first = self.rounds.len() - support.len();
        let beta = p.beta as usize;
        if support.len() >= beta {
            for i in 0..=support.len() - beta {
                let len = *support[i..i + beta].iter().min().unwrap();
                consider(len, (first + i) as Round, FinalityRule::Support);
            }
        }

        // (ii): α₃ reported finals in two consecutive rounds.
        let mut reported: Vec<usize> = Vec::new();
        for rd in self.rounds.iter().rev() {
            let m = rd.fin_front.iter().map(|x| x.lcp(&self.pref)).max().unwrap_or(0);
            if m <= flen {
                break;
            }
            reported.push(m);
        }
        reported.reverse();
        let first = self.rounds.len() - reported.len();
        for i in 0..reported.len().saturating_sub(1) {
            consider(reported[i].min(reported[i + 1]), (first + i) as Round, FinalityRule::Reported);
        }

        let (len, s0, rule) = best?;
        self.final_ = self.pref.prefix(len);
        self.lastfinalized = s0;
        self.prune_below_final();
        self.events.push(EvenEvent::Finalized { sigma: self.final_.clone(), from_round: s0, rule });
        Some(self.final_.clone())
    }

    fn prune_below_final(&mut self) {
        self.trie.reroot(&self.final_);
    }

    /// `(stuck, e, final)` once per round while `s - lastfinalized ≥ γ`.
    pub fn stuck_check(&mut self, ctx: &EvenCtx<'_>) -> Option<EvenOut> {
        if self.s < self.lastfinalized + ctx.params.gamma || self.stuck_round == Some(self.s) {
            return None;
        }
        self.stuck_round = Some(self.s);
        self.events.push(EvenEvent::StuckSent { round: self.s });
        Some(EvenOut::Stuck { sigma: self.final_.clone() })
    }

    /// The longest prefix of `pref` locked at least `4Δ` ago, or `final` if longer.
    pub fn aged_lock(&self, t: Timeslot, delta: u64) -> ChainString {
        let mut best = None;
        let mut node = self.trie.find(&self.final_);
        for l in self.final_.len() + 1..=self.pref.len() {
            node = node.and_then(|i| self.trie.child(i, self.pref.bit(l - 1)));
            let Some(i) = node else { break };
            if self.trie.node(i).locktime.is_some_and(|lt| t >= lt + 4 * delta) {
                best = Some(l);
            }
        }
        best.map_or_else(|| self.final_.clone(), |l| self.pref.prefix(l))
    }

    /// Builds `(s′, chain(pref), σ, final, e)` for the first request `(s′, e)` from `from`.
    pub fn answer_sample_request(
        &mut self,
        ctx: &mut EvenCtx<'_>,
        from: ProcessId,
        req: SampleRequest,
    ) -> Option<EvenOut> {
        if !self.ready || req.epoch != self.epoch || !self.answered.insert((from, req.round)) {
            return None;
        }
        let (chain, lock) = match &self.answer_cache {
            Some((t, c, l)) if *t == ctx.t => (c.clone(), l.clone()),
            _ => {
                let last = ctx.store.resolve(&self.pref).last;
                let chain = ctx.store.chain_to(last.hash()).expect("resolved block is stored");
                let lock = self.aged_lock(ctx.t, ctx.params.delta);
                self.answer_cache = Some((ctx.t, chain.clone(), lock.clone()));
                (chain, lock)
            }
        };
        Some(EvenOut::Response {
            to: from,
            resp: Arc::new(SampleResponse {
                round: req.round,
                epoch: self.epoch,
                chain,
                lock,
                fin: self.final_.clone(),
            }),
        })
    }

    /// Freezes rounds whose response window has passed.
    pub fn close_rounds(&mut self, ctx: &EvenCtx<'_>) {
        let delta2 = 2 * ctx.params.delta;
        for rd in self.rounds.iter_mut().rev() {
            if rd.slots.is_none() {
                break;
            }
            if rd.start + delta2 <= ctx.t {
                rd.refresh(ctx.params);
                rd.slots = None;
            }
        }
    }

    /// One timeslot of the even-epoch pass, excluding epoch-certificate handling.
    /// `responses` and `requests` are the messages delivered at `ctx.t`.
    pub fn step(
        &mut self,
        ctx: &mut EvenCtx<'_>,
        responses: &[(ProcessId, Arc<SampleResponse>)],
        requests: &[(ProcessId, SampleRequest)],
    ) -> Result<Vec<EvenOut>> {
        let mut out = self.begin_round(ctx);
        for (from, r) in responses {
            self.ingest_response(ctx, *from, r);
        }
        self.window_pass(ctx);
        self.update_locks(ctx);
        let all_dec = self.update_pref(ctx)?;
        self.advance_round_if_ready(ctx, all_dec);
        self.finalize_check(ctx);
        out.extend(self.stuck_check(ctx));
        self.answer_cache = None;
        for (from, req) in requests {
            out.extend(self.answer_sample_request(ctx, *from, *req));
        }
        self.close_rounds(ctx);
        // The next round starts in the timeslot the previous one ends.
        out.extend(self.begin_round(ctx));
        Ok(out)
    }
}

#[cfg(test)]
impl EvenEpochState {
    fn set_locktime(&mut self, sigma: &ChainString, t: Timeslot) {
        self.trie.reroot(&self.final_);
        let i = self.trie.find_or_insert(sigma).expect("extends final");
        self.trie.node_mut(i).locktime = Some(t);
    }

    fn set_val(&mut self, sigma: &ChainString, v: bool) {
        self.trie.reroot(&self.final_);
        let i = self.trie.find_or_insert(sigma).expect("extends final");
        self.trie.node_mut(i).val = Some(v);
    }

    fn locked_strings(&self) -> Vec<ChainString> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, self.trie.base.clone())];
        while let Some((i, sigma)) = stack.pop() {
            if self.trie.node(i).locktime.is_some() {
                out.push(sigma.clone());
            }
            for bit in [false, true] {
                if let Some(c) = self.trie.child(i, bit) {
                    stack.push((c, sigma.with_bit(bit)));
                }
            }
        }
        out
    }

    fn trie_is_blank(&self) -> bool {
        self.trie.nodes.iter().all(|n| n.val.is_none() && n.locktime.is_none() && n.lockbound == 0)
    }
}
