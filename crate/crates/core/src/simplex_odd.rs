//! The odd-epoch state machine: a Simplex instance anchored to a starting
//! certificate, run until a finalized chain carries `μ` non-dummy blocks.

use std::collections::BTreeMap;

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use std::sync::Arc;

use crate::certs::{
    Body, CertAccumulator, Certificate, Finalization, KeyRing, Notarization, SignedMsg, SigningKey,
    StartingCertificate,
};
use crate::chainstr::{hash_content, Block, BlockStore, ChainString, SharedOracle};
use crate::digest::{Digest, DigestBuilder};
use crate::error::{Error, Result};
use crate::params::ProtocolParams;
use crate::types::{Epoch, ProcessId, Timeslot};

/// Most notarized chains tracked per height. Dummy and non-dummy notarizations
/// at the same heights can otherwise multiply the candidates.
const MAX_CHAINS_PER_HEIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockBody {
    /// `H(b_1, ..., b_{h-1})`.
    pub parent: Digest,
    pub txs: Vec<Vec<u8>>,
    pub sc: Arc<StartingCertificate>,
}

/// `(h, parent, txs, e, C)`; `body` is `None` for the dummy block `⊥_{e,h}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimplexBlock {
    pub height: u64,
    pub epoch: Epoch,
    pub body: Option<BlockBody>,
    digest: Digest,
}

impl SimplexBlock {
    pub fn dummy(epoch: Epoch, height: u64) -> Self {
        let mut b = DigestBuilder::new("simplex-dummy");
        b.u64(epoch).u64(height);
        let digest = b.finish();
        SimplexBlock { height, epoch, body: None, digest }
    }

    pub fn new(epoch: Epoch, height: u64, parent: Digest, txs: Vec<Vec<u8>>, sc: Arc<StartingCertificate>) -> Self {
        let mut b = DigestBuilder::new("simplex-block");
        b.u64(epoch).u64(height).digest(&parent).digest(&sc.digest()).u64(txs.len() as u64);
        for tx in &txs {
            b.bytes(tx);
        }
        let digest = b.finish();
        SimplexBlock { height, epoch, body: Some(BlockBody { parent, txs, sc }), digest }
    }

    pub fn is_dummy(&self) -> bool {
        self.body.is_none()
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn sc(&self) -> Option<&Arc<StartingCertificate>> {
        self.body.as_ref().map(|b| &b.sc)
    }
}

/// `H()` of the empty chain: the parent of every height-1 block.
pub fn empty_chain_hash() -> Digest {
    Digest::of("simplex-chain", &[])
}

/// `H(b_1, ..., b_i)` from `H(b_1, ..., b_{i-1})`.
pub fn extend_chain_hash(prev: &Digest, block: &SimplexBlock) -> Digest {
    let mut b = DigestBuilder::new("simplex-chain");
    b.digest(prev).digest(&block.digest());
    b.finish()
}

pub fn chain_hash(blocks: &[Arc<SimplexBlock>]) -> Digest {
    blocks.iter().fold(empty_chain_hash(), |h, b| extend_chain_hash(&h, b))
}

/// `lead(h) = p_{h mod n}`.
pub fn lead(h: u64, n: usize) -> ProcessId {
    ProcessId((h % n as u64) as usize)
}

/// The non-dummy blocks of a chain, in order.
pub fn reduce_chain(blocks: &[Arc<SimplexBlock>]) -> Vec<Arc<SimplexBlock>> {
    blocks.iter().filter(|b| !b.is_dummy()).cloned().collect()
}

/// `H(b)` for a Simplex block, as an `L`-bit value.
pub fn simplex_hash(oracle: &SharedOracle, b: &SimplexBlock) -> Result<ChainString> {
    Ok(hash_content(oracle, &b.digest())?.to_chain_string())
}

/// `fin(b_1, ..., b_h) = Pref(C) * H(b_{j1}) * ... * H(b_{jμ})`.
pub fn fin_of(blocks: &[Arc<SimplexBlock>], mu: usize, oracle: &SharedOracle) -> Result<ChainString> {
    let reduced = reduce_chain(blocks);
    if reduced.len() < mu {
        return Err(Error::ProtocolViolation(format!("reduced height {} is below μ = {mu}", reduced.len())));
    }
    let sc = reduced[0].sc().expect("non-dummy");
    if reduced.iter().any(|b| b.sc().unwrap().digest() != sc.digest()) {
        return Err(Error::ProtocolViolation("non-dummy blocks carry different starting certificates".into()));
    }
    let mut out = sc.pref().clone();
    for b in &reduced[..mu] {
        out = out.concat(&simplex_hash(oracle, b)?);
    }
    Ok(out)
}

/// Checks that `blocks` is a Simplex-blockchain for `epoch`, with every
/// embedded starting certificate accepted by `sc_ok`.
pub fn is_valid_chain(blocks: &[Arc<SimplexBlock>], epoch: Epoch, mut sc_ok: impl FnMut(&StartingCertificate) -> bool) -> bool {
    let mut prev = empty_chain_hash();
    let mut last_sc: Option<Digest> = None;
    for (i, b) in blocks.iter().enumerate() {
        if b.height != i as u64 + 1 || b.epoch != epoch {
            return false;
        }
        if let Some(body) = &b.body {
            if body.parent != prev || body.sc.epoch != epoch || !sc_ok(&body.sc) {
                return false;
            }
            if last_sc.is_some_and(|d| d != body.sc.digest()) {
                return false;
            }
            last_sc = Some(body.sc.digest());
        } else if *b.as_ref() != SimplexBlock::dummy(epoch, b.height) {
            return false;
        }
        prev = extend_chain_hash(&prev, b);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotarizedBlock {
    pub block: Arc<SimplexBlock>,
    pub notarization: Arc<Notarization>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteMsg {
    pub signed: SignedMsg,
    pub block: Arc<SimplexBlock>,
}

/// `(propose, e, h, b_1, ..., b_{h-1}, b_h, S)`, signed by the leader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub signed: SignedMsg,
    pub blocks: Vec<Arc<SimplexBlock>>,
    /// Notarizations for `b_1, ..., b_{h-1}`.
    pub notarizations: Vec<Arc<Notarization>>,
}

impl Proposal {
    pub fn new(key: &SigningKey, blocks: Vec<Arc<SimplexBlock>>, notarizations: Vec<Arc<Notarization>>) -> Self {
        let last = blocks.last().expect("proposal has a block");
        let signed = key.sign(Body::Propose { epoch: last.epoch, height: last.height, block: last.digest() });
        Proposal { signed, blocks, notarizations }
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn block(&self) -> &Arc<SimplexBlock> {
        self.blocks.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OddMsg {
    StartVote(SignedMsg),
    Propose(Arc<Proposal>),
    Vote(Arc<VoteMsg>),
    Finalize(SignedMsg),
    Notarized(Arc<NotarizedBlock>),
    Finalized(Arc<Finalization>),
}

impl OddMsg {
    pub fn epoch(&self) -> Epoch {
        match self {
            OddMsg::StartVote(m) | OddMsg::Finalize(m) => m.body.epoch(),
            OddMsg::Propose(p) => p.signed.body.epoch(),
            OddMsg::Vote(v) => v.signed.body.epoch(),
            OddMsg::Notarized(nb) => nb.notarization.epoch,
            OddMsg::Finalized(f) => f.epoch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Armed(Timeslot),
    Fired,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OddEvent {
    Ready,
    ViewEntered { h: u64 },
    TimerFired { h: u64 },
    Voted { h: u64, dummy: bool },
    Rejected { h: u64, reason: String },
    Notarized { h: u64, block: Digest, dummy: bool },
    Finalized { h: u64 },
    Concluded { fin: ChainString, h: u64 },
}

/// A notarized Simplex-blockchain `(b_1, ..., b_h, S)`.
#[derive(Debug, Clone)]
pub struct NotarizedChain {
    pub blocks: Vec<Arc<SimplexBlock>>,
    pub notarizations: Vec<Arc<Notarization>>,
    pub hash: Digest,
    sc: Option<Digest>,
}

impl NotarizedChain {
    fn empty() -> Self {
        NotarizedChain { blocks: Vec::new(), notarizations: Vec::new(), hash: empty_chain_hash(), sc: None }
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn reduced_height(&self) -> usize {
        self.blocks.iter().filter(|b| !b.is_dummy()).count()
    }

    fn extend(&self, nb: &NotarizedBlock) -> Option<NotarizedChain> {
        let b = &nb.block;
        if b.height != self.height() + 1 {
            return None;
        }
        let sc = match &b.body {
            None => self.sc,
            Some(body) => {
                if body.parent != self.hash || self.sc.is_some_and(|d| d != body.sc.digest()) {
                    return None;
                }
                Some(body.sc.digest())
            }
        };
        let mut blocks = self.blocks.clone();
        blocks.push(b.clone());
        let mut notarizations = self.notarizations.clone();
        notarizations.push(nb.notarization.clone());
        Some(NotarizedChain { hash: extend_chain_hash(&self.hash, b), blocks, notarizations, sc })
    }
}

/// Outcome of an odd epoch at one process.
#[derive(Debug, Clone)]
pub struct Conclusion {
    pub fin: ChainString,
    pub chain: Vec<Arc<SimplexBlock>>,
    /// Non-dummy blocks carried into the even-epoch store, when `Pref(C)` ends
    /// on a block boundary there.
    pub bridged: Vec<Block>,
}

#[derive(Debug)]
pub struct OddEpochState {
    pub epoch: Epoch,
    pub ready: bool,
    pub h: u64,
    start_sent: bool,
    pub sc: Option<Arc<StartingCertificate>>,
    timers: HashMap<u64, Timer>,
    proposed: HashSet<u64>,
    /// First proposal from `lead(h)`, per view, until the view is reached.
    proposals: BTreeMap<u64, Arc<Proposal>>,
    proposal_seen: HashSet<u64>,
    acc: CertAccumulator,
    notarized: HashMap<Digest, Arc<NotarizedBlock>>,
    notarized_at: HashMap<u64, Vec<Arc<NotarizedBlock>>>,
    chains: HashMap<u64, Vec<Arc<NotarizedChain>>>,
    finalizations: HashMap<u64, Arc<Finalization>>,
    sc_valid: HashMap<Digest, bool>,
    gossiped: HashSet<Digest>,
    pub concluded: Option<Conclusion>,
    pub events: Vec<OddEvent>,
}

/// Everything a process needs from its surroundings during an odd-epoch step.
pub struct OddCtx<'a> {
    pub id: ProcessId,
    pub key: &'a SigningKey,
    pub ring: &'a KeyRing,
    pub params: &'a ProtocolParams,
    pub oracle: &'a SharedOracle,
    pub t: Timeslot,
}

impl OddEpochState {
    pub fn new(epoch: Epoch) -> Self {
        OddEpochState {
            epoch,
            ready: false,
            h: 0,
            start_sent: false,
            sc: None,
            timers: HashMap::default(),
            proposed: HashSet::default(),
            proposals: BTreeMap::new(),
            proposal_seen: HashSet::default(),
            acc: CertAccumulator::new(),
            notarized: HashMap::default(),
            notarized_at: HashMap::default(),
            chains: HashMap::default(),
            finalizations: HashMap::default(),
            sc_valid: HashMap::default(),
            gossiped: HashSet::default(),
            concluded: None,
            events: Vec::new(),
        }
    }

    pub fn timer(&self, h: u64) -> Option<Timer> {
        self.timers.get(&h).copied()
    }

    pub fn chains_at(&self, h: u64) -> &[Arc<NotarizedChain>] {
        self.chains.get(&h).map_or(&[], |v| v.as_slice())
    }

    pub fn finalization(&self, h: u64) -> Option<&Arc<Finalization>> {
        self.finalizations.get(&h)
    }

    fn sc_ok(&mut self, ring: &KeyRing, sc: &StartingCertificate) -> bool {
        *self.sc_valid.entry(sc.digest()).or_insert_with(|| sc.epoch == self.epoch && sc.verify(ring))
    }

    fn first_sight(&mut self, d: Digest) -> bool {
        self.gossiped.insert(d)
    }

    /// Sends the starting vote once and becomes ready once an SC is held.
    pub fn enter_odd_epoch(&mut self, ctx: &OddCtx<'_>, pref: &ChainString) -> Vec<OddMsg> {
        let mut out = Vec::new();
        if self.ready {
            return out;
        }
        if !self.start_sent {
            self.start_sent = true;
            out.push(OddMsg::StartVote(ctx.key.sign(Body::StartVote { epoch: self.epoch, pref: pref.clone() })));
        }
        if self.sc.is_some() {
            self.ready = true;
            self.h = 1;
            self.events.push(OddEvent::Ready);
            self.events.push(OddEvent::ViewEntered { h: 1 });
        }
        out
    }

    fn adopt_sc(&mut self, sc: &Arc<StartingCertificate>) {
        if self.sc.is_none() {
            self.sc = Some(sc.clone());
        }
    }

    /// Takes in one delivered message. Returns messages to gossip onward.
    pub fn receive(&mut self, ctx: &OddCtx<'_>, from: ProcessId, msg: &OddMsg) -> Result<Vec<OddMsg>> {
        let n = ctx.params.n;
        let mut out = Vec::new();
        match msg {
            OddMsg::StartVote(m) => {
                if m.signer != from || !ctx.ring.verify(m) {
                    return Err(Error::Malformed { from, reason: "bad start vote".into() });
                }
                if let Some(Certificate::Starting(sc)) = self.acc.accumulate(m.clone(), n)? {
                    self.adopt_sc(&Arc::new(sc));
                }
            }
            OddMsg::Vote(v) => {
                let ok = matches!(&v.signed.body, Body::Vote { epoch, height, block }
                    if *epoch == self.epoch && *height == v.block.height && *block == v.block.digest());
                if !ok || !ctx.ring.verify(&v.signed) {
                    return Err(Error::Malformed { from, reason: "bad vote".into() });
                }
                if let Some(Certificate::Notarization(nz)) = self.acc.accumulate(v.signed.clone(), n)? {
                    let nb = Arc::new(NotarizedBlock { block: v.block.clone(), notarization: Arc::new(nz) });
                    out.extend(self.add_notarized(ctx, nb));
                }
            }
            OddMsg::Finalize(m) => {
                if !matches!(m.body, Body::Finalize { epoch, .. } if epoch == self.epoch) || !ctx.ring.verify(m) {
                    return Err(Error::Malformed { from, reason: "bad finalize".into() });
                }
                if let Some(Certificate::Finalization(f)) = self.acc.accumulate(m.clone(), n)? {
                    out.extend(self.add_finalization(Arc::new(f)));
                }
            }
            OddMsg::Notarized(nb) => {
                let nz = &nb.notarization;
                if nz.epoch != self.epoch || nz.block != nb.block.digest() || nz.height != nb.block.height || !nz.verify(ctx.ring) {
                    return Err(Error::Malformed { from, reason: "bad notarization".into() });
                }
                out.extend(self.add_notarized(ctx, nb.clone()));
            }
            OddMsg::Finalized(f) => {
                if f.epoch != self.epoch || !f.verify(ctx.ring) {
                    return Err(Error::Malformed { from, reason: "bad finalization".into() });
                }
                out.extend(self.add_finalization(f.clone()));
            }
            OddMsg::Propose(p) => out.extend(self.receive_proposal(ctx, p)?),
        }
        Ok(out)
    }

    fn add_finalization(&mut self, f: Arc<Finalization>) -> Vec<OddMsg> {
        if self.finalizations.contains_key(&f.height) {
            return Vec::new();
        }
        self.finalizations.insert(f.height, f.clone());
        vec![OddMsg::Finalized(f)]
    }

    /// Records a notarized block and grows every chain it extends.
    fn add_notarized(&mut self, ctx: &OddCtx<'_>, nb: Arc<NotarizedBlock>) -> Vec<OddMsg> {
        let d = nb.block.digest();
        if self.notarized.contains_key(&d) {
            return Vec::new();
        }
        if let Some(sc) = nb.block.sc() {
            if !self.sc_ok(ctx.ring, sc) {
                return Vec::new();
            }
        }
        self.notarized.insert(d, nb.clone());
        let h = nb.block.height;
        self.notarized_at.entry(h).or_default().push(nb.clone());
        self.events.push(OddEvent::Notarized { h, block: d, dummy: nb.block.is_dummy() });

        let parents: Vec<Arc<NotarizedChain>> = if h == 1 {
            vec![Arc::new(NotarizedChain::empty())]
        } else {
            self.chains_at(h - 1).to_vec()
        };
        let mut frontier: Vec<Arc<NotarizedChain>> = parents.iter().filter_map(|c| c.extend(&nb)).map(Arc::new).collect();
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for c in frontier {
                let height = c.height();
                let slot = self.chains.entry(height).or_default();
                if slot.len() >= MAX_CHAINS_PER_HEIGHT || slot.iter().any(|x| x.hash == c.hash) {
                    continue;
                }
                slot.push(c.clone());
                for child in self.notarized_at.get(&(height + 1)).into_iter().flatten() {
                    if let Some(e) = c.extend(child) {
                        next.push(Arc::new(e));
                    }
                }
            }
            frontier = next;
        }
        self.first_sight(d);
        vec![OddMsg::Notarized(nb)]
    }

    fn receive_proposal(&mut self, ctx: &OddCtx<'_>, p: &Arc<Proposal>) -> Result<Vec<OddMsg>> {
        let h = p.height();
        let from = p.signed.signer;
        let ok = h >= 1
            && matches!(p.signed.body, Body::Propose { epoch, height, block }
                if epoch == self.epoch && height == h && block == p.block().digest())
            && ctx.ring.verify(&p.signed)
            && p.notarizations.len() as u64 == h - 1;
        if !ok {
            return Err(Error::Malformed { from, reason: "bad proposal".into() });
        }
        let mut out = Vec::new();
        if self.first_sight(p.signed.tag) {
            out.push(OddMsg::Propose(p.clone()));
        }
        for sc in p.blocks.iter().filter_map(|b| b.sc()) {
            if self.sc_ok(ctx.ring, sc) {
                self.adopt_sc(sc);
            }
        }
        // The embedded notarizations are as good as received ones.
        for (b, nz) in p.blocks.iter().zip(&p.notarizations) {
            if nz.block == b.digest() && nz.epoch == self.epoch && nz.height == b.height && nz.verify(ctx.ring) {
                let nb = Arc::new(NotarizedBlock { block: b.clone(), notarization: nz.clone() });
                out.extend(self.add_notarized(ctx, nb));
            }
        }
        if from == lead(h, ctx.params.n) && self.proposal_seen.insert(h) {
            self.proposals.insert(h, p.clone());
        }
        Ok(out)
    }

    /// Checks (i)–(iii) on the first proposal for the current view.
    pub fn validate_and_vote(&mut self, ctx: &OddCtx<'_>, p: &Proposal) -> Option<OddMsg> {
        let h = p.height();
        let reject = |s: &mut Self, reason: &str| {
            s.events.push(OddEvent::Rejected { h, reason: reason.into() });
            None
        };
        if p.block().is_dummy() {
            return reject(self, "dummy block proposed");
        }
        let ring = ctx.ring;
        let mut cache = std::mem::take(&mut self.sc_valid);
        let epoch = self.epoch;
        let valid = is_valid_chain(&p.blocks, epoch, |sc| {
            *cache.entry(sc.digest()).or_insert_with(|| sc.verify(ring))
        });
        self.sc_valid = cache;
        if !valid {
            return reject(self, "not a valid chain");
        }
        let notarized = p.notarizations.len() as u64 + 1 == h
            && p.blocks[..h as usize - 1].iter().zip(&p.notarizations).all(|(b, nz)| {
            nz.block == b.digest() && nz.height == b.height && nz.epoch == self.epoch && nz.verify(ring)
        });
        if !notarized {
            return reject(self, "parent chain not notarized");
        }
        self.events.push(OddEvent::Voted { h, dummy: false });
        let signed = ctx.key.sign(Body::Vote { epoch: self.epoch, height: h, block: p.block().digest() });
        Some(OddMsg::Vote(Arc::new(VoteMsg { signed, block: p.block().clone() })))
    }

    /// The proposal `lead(h)` sends on entering view `h`, if it holds a
    /// notarized chain of height `h - 1`.
    pub fn make_proposal(&self, key: &SigningKey, pending: &[Vec<u8>]) -> Option<Proposal> {
        let h = self.h;
        let parent = if h == 1 { Arc::new(NotarizedChain::empty()) } else { self.chains_at(h - 1).first()?.clone() };
        let sc = match parent.blocks.iter().rev().find_map(|b| b.sc()) {
            Some(sc) => sc.clone(),
            None => self.sc.clone()?,
        };
        let included: HashSet<&Vec<u8>> = parent.blocks.iter().filter_map(|b| b.body.as_ref()).flat_map(|b| &b.txs).collect();
        let txs: Vec<Vec<u8>> = pending.iter().filter(|tx| !included.contains(tx)).cloned().collect();
        let block = Arc::new(SimplexBlock::new(self.epoch, h, parent.hash, txs, sc));
        let mut blocks = parent.blocks.clone();
        blocks.push(block);
        Some(Proposal::new(key, blocks, parent.notarizations.clone()))
    }

    /// Dummy vote if the current view's timer is due.
    pub fn on_timer_fire(&mut self, ctx: &OddCtx<'_>) -> Option<OddMsg> {
        let h = self.h;
        match self.timers.get(&h) {
            Some(Timer::Armed(at)) if *at <= ctx.t => {}
            _ => return None,
        }
        self.timers.insert(h, Timer::Fired);
        self.events.push(OddEvent::TimerFired { h });
        self.events.push(OddEvent::Voted { h, dummy: true });
        let dummy = Arc::new(SimplexBlock::dummy(self.epoch, h));
        let signed = ctx.key.sign(Body::Vote { epoch: self.epoch, height: h, block: dummy.digest() });
        Some(OddMsg::Vote(Arc::new(VoteMsg { signed, block: dummy })))
    }

    /// Leaves view `h` once a notarized chain of height `h` is held,
    /// finalizing if the timer has not fired.
    pub fn on_notarized_height(&mut self, ctx: &OddCtx<'_>) -> Option<Option<OddMsg>> {
        let h = self.h;
        if self.chains_at(h).is_empty() {
            return None;
        }
        let mut out = None;
        if !matches!(self.timers.get(&h), Some(Timer::Fired)) {
            self.timers.insert(h, Timer::Cancelled);
            out = Some(OddMsg::Finalize(ctx.key.sign(Body::Finalize { epoch: self.epoch, height: h })));
            self.events.push(OddEvent::Finalized { h });
        }
        self.h += 1;
        self.events.push(OddEvent::ViewEntered { h: self.h });
        Some(out)
    }

    /// A finalized chain of reduced height `≥ μ` ending in a non-dummy block.
    pub fn finalized_chain(&self, mu: usize) -> Option<Arc<NotarizedChain>> {
        let mut heights: Vec<&u64> = self.finalizations.keys().collect();
        heights.sort();
        heights.into_iter().find_map(|h| {
            self.chains_at(*h)
                .iter()
                .find(|c| c.reduced_height() >= mu && !c.blocks.last().unwrap().is_dummy())
                .cloned()
        })
    }

    /// Computes `fin` and the bridged blocks for `store`.
    pub fn conclude_epoch(
        &mut self,
        chain: &NotarizedChain,
        params: &ProtocolParams,
        oracle: &SharedOracle,
        store: &BlockStore,
    ) -> Result<Conclusion> {
        let fin = fin_of(&chain.blocks, params.mu, oracle)?;
        let reduced = reduce_chain(&chain.blocks);
        let pref = reduced[0].sc().unwrap().pref().clone();
        let r = store.resolve(&pref);
        let mut bridged = Vec::new();
        if r.matched && r.reduct_len == pref.len() {
            let mut parent = r.last;
            for b in &reduced[..params.mu] {
                let blk = Block::with_id(oracle, &parent, b.digest(), b.body.as_ref().unwrap().txs.clone())?;
                bridged.push(blk.clone());
                parent = blk;
            }
        }
        self.events.push(OddEvent::Concluded { fin: fin.clone(), h: chain.height() });
        let c = Conclusion { fin, chain: chain.blocks.clone(), bridged };
        self.concluded = Some(c.clone());
        Ok(c)
    }

    /// One timeslot after all deliveries: entry, timers, proposals, view
    /// changes and the epoch-end check. `pending` feeds `MakeProposal`.
    pub fn tick(
        &mut self,
        ctx: &OddCtx<'_>,
        pref: &ChainString,
        pending: &[Vec<u8>],
        store: &BlockStore,
    ) -> Result<Vec<OddMsg>> {
        let mut out = self.enter_odd_epoch(ctx, pref);
        if !self.ready || self.concluded.is_some() {
            return Ok(out);
        }
        loop {
            let h = self.h;
            self.timers.entry(h).or_insert(Timer::Armed(ctx.t + 3 * ctx.params.delta));
            if ctx.id == lead(h, ctx.params.n) && !self.proposed.contains(&h) {
                if let Some(p) = self.make_proposal(ctx.key, pending) {
                    self.proposed.insert(h);
                    out.push(OddMsg::Propose(Arc::new(p)));
                }
            }
            if let Some(p) = self.proposals.remove(&h) {
                out.extend(self.validate_and_vote(ctx, &p));
            }
            match self.on_notarized_height(ctx) {
                Some(fin) => out.extend(fin),
                None => {
                    out.extend(self.on_timer_fire(ctx));
                    break;
                }
            }
        }
        self.proposals.retain(|h, _| *h >= self.h);
        if let Some(chain) = self.finalized_chain(ctx.params.mu) {
            self.conclude_epoch(&chain, ctx.params, ctx.oracle, store)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainstr::{HashBackend, HashOracle};

    const N: usize = 10;

    struct Fx {
        ring: Arc<KeyRing>,
        params: ProtocolParams,
        oracle: SharedOracle,
        store: BlockStore,
    }

    impl Fx {
        fn new() -> Self {
            let oracle = HashOracle::shared(HashBackend::Oracle, 16, 3).unwrap();
            let store = BlockStore::new(Block::genesis(&oracle).unwrap());
            let params = ProtocolParams { n: N, f: 1, k: 20, alpha1: 11, alpha2: 16, alpha3: 12, hash_bits: 16, ..Default::default() };
            Fx { ring: KeyRing::new(N, 9), params, oracle, store }
        }

        fn ctx<'a>(&'a self, key: &'a SigningKey, t: Timeslot) -> OddCtx<'a> {
            OddCtx { id: key.id(), key, ring: &self.ring, params: &self.params, oracle: &self.oracle, t }
        }

        fn sc(&self, epoch: Epoch, pref: &ChainString) -> Arc<StartingCertificate> {
            let votes = (0..8)
                .map(|i| self.ring.key(ProcessId(i)).sign(Body::StartVote { epoch, pref: pref.clone() }))
                .collect();
            Arc::new(StartingCertificate::new(epoch, votes))
        }

        fn notarize(&self, b: &SimplexBlock) -> Arc<Notarization> {
            let votes = (0..9)
                .map(|i| self.ring.key(ProcessId(i)).sign(Body::Vote { epoch: b.epoch, height: b.height, block: b.digest() }))
                .collect();
            Arc::new(Notarization { epoch: b.epoch, height: b.height, block: b.digest(), votes })
        }
    }

    fn cs(s: &str) -> ChainString {
        ChainString::parse(s).unwrap()
    }

    /// Builds a chain whose height-`i` block is a dummy iff bit `i - 1` of `mask` is clear.
    fn chain_from_mask(epoch: Epoch, mask: u32, h: u64, sc: &Arc<StartingCertificate>) -> Vec<Arc<SimplexBlock>> {
        let mut out: Vec<Arc<SimplexBlock>> = Vec::new();
        for i in 1..=h {
            let b = if mask >> (i - 1) & 1 == 1 {
                SimplexBlock::new(epoch, i, chain_hash(&out), vec![vec![i as u8]], sc.clone())
            } else {
                SimplexBlock::dummy(epoch, i)
            };
            out.push(Arc::new(b));
        }
        out
    }

    #[test]
    fn leader_rotates() {
        assert_eq!(lead(0, 4), ProcessId(0));
        assert_eq!(lead(5, 4), ProcessId(1));
        assert_eq!(lead(7, 7), ProcessId(0));
    }

    #[test]
    fn dummy_blocks_are_canonical() {
        assert_eq!(SimplexBlock::dummy(1, 3), SimplexBlock::dummy(1, 3));
        assert_ne!(SimplexBlock::dummy(1, 3).digest(), SimplexBlock::dummy(3, 3).digest());
        assert_ne!(SimplexBlock::dummy(1, 3).digest(), SimplexBlock::dummy(1, 4).digest());
    }

    #[test]
    fn fin_matches_index_oracle_for_every_dummy_pattern() {
        let fx = Fx::new();
        let pref = cs("1011");
        let sc = fx.sc(1, &pref);
        for h in 0..=6u64 {
            for mask in 0..(1u32 << h) {
                let blocks = chain_from_mask(1, mask, h, &sc);
                assert!(is_valid_chain(&blocks, 1, |_| true));
                let idx: Vec<usize> = (0..h as usize).filter(|i| mask >> i & 1 == 1).collect();
                assert_eq!(reduce_chain(&blocks).len(), idx.len());
                for mu in 1..=3 {
                    let got = fin_of(&blocks, mu, &fx.oracle);
                    if idx.len() < mu {
                        assert!(got.is_err());
                        continue;
                    }
                    let mut want = pref.to_bit_string();
                    for &i in &idx[..mu] {
                        let v = fx.oracle.lock().unwrap().hash(&blocks[i].digest()).unwrap();
                        want.push_str(&v.to_chain_string().to_bit_string());
                    }
                    assert_eq!(got.unwrap().to_bit_string(), want, "h={h} mask={mask:b} mu={mu}");
                }
            }
        }
    }

    #[test]
    fn invalid_chains_rejected() {
        let fx = Fx::new();
        let sc = fx.sc(1, &cs("1"));
        let other = fx.sc(1, &cs("0"));
        let mut blocks = chain_from_mask(1, 0b11, 2, &sc);
        assert!(is_valid_chain(&blocks, 1, |_| true));
        assert!(!is_valid_chain(&blocks, 3, |_| true));
        assert!(!is_valid_chain(&blocks, 1, |_| false));
        blocks[1] = Arc::new(SimplexBlock::new(1, 2, empty_chain_hash(), vec![], sc.clone()));
        assert!(!is_valid_chain(&blocks, 1, |_| true));
        blocks[1] = Arc::new(SimplexBlock::new(1, 2, chain_hash(&blocks[..1]), vec![], other));
        assert!(!is_valid_chain(&blocks, 1, |_| true));
        blocks.swap(0, 1);
        assert!(!is_valid_chain(&blocks, 1, |_| true));
    }

    #[test]
    fn proposal_builds_on_notarized_chain_without_repeating_txs() {
        let fx = Fx::new();
        let key = fx.ring.key(ProcessId(2));
        let ctx = fx.ctx(&key, 0);
        let sc = fx.sc(1, &cs("1"));
        let mut st = OddEpochState::new(1);
        st.sc = Some(sc.clone());
        st.ready = true;
        st.h = 1;
        let p1 = st.make_proposal(&key, &[vec![7], vec![8]]).unwrap();
        assert_eq!(p1.height(), 1);
        assert_eq!(p1.block().body.as_ref().unwrap().parent, empty_chain_hash());
        let nb = Arc::new(NotarizedBlock { block: p1.block().clone(), notarization: fx.notarize(p1.block()) });
        st.receive(&ctx, ProcessId(4), &OddMsg::Notarized(nb)).unwrap();
        assert!(st.on_notarized_height(&ctx).is_some());
        assert_eq!(st.h, 2);
        let p2 = st.make_proposal(&key, &[vec![7], vec![9]]).unwrap();
        assert_eq!(p2.height(), 2);
        assert_eq!(p2.notarizations.len(), 1);
        assert_eq!(p2.block().body.as_ref().unwrap().txs, vec![vec![9]]);
        assert!(is_valid_chain(&p2.blocks, 1, |c| c.verify(&fx.ring)));
    }

    #[test]
    fn bad_proposals_get_no_vote() {
        let fx = Fx::new();
        let key = fx.ring.key(ProcessId(3));
        let ctx = fx.ctx(&key, 0);
        let sc = fx.sc(1, &cs("1"));
        let mut st = OddEpochState::new(1);
        let leader = fx.ring.key(lead(2, N));
        let blocks = chain_from_mask(1, 0b11, 2, &sc);
        // Parent without a notarization.
        let p = Proposal::new(&leader, blocks.clone(), vec![]);
        assert!(st.validate_and_vote(&ctx, &p).is_none());
        let p = Proposal::new(&leader, blocks.clone(), vec![fx.notarize(&blocks[0])]);
        assert!(matches!(st.validate_and_vote(&ctx, &p), Some(OddMsg::Vote(_))));
        let dummy_tip = vec![blocks[0].clone(), Arc::new(SimplexBlock::dummy(1, 2))];
        let p = Proposal::new(&leader, dummy_tip, vec![fx.notarize(&blocks[0])]);
        assert!(st.validate_and_vote(&ctx, &p).is_none());
        // Embedded SC below threshold.
        let weak = Arc::new(StartingCertificate::new(1, vec![fx.ring.key(ProcessId(0)).sign(Body::StartVote { epoch: 1, pref: cs("1") })]));
        let b = Arc::new(SimplexBlock::new(1, 1, empty_chain_hash(), vec![], weak));
        let p = Proposal::new(&fx.ring.key(lead(1, N)), vec![b], vec![]);
        assert!(st.validate_and_vote(&ctx, &p).is_none());
    }

    #[test]
    fn timer_fires_after_three_delta_and_suppresses_finalize() {
        let fx = Fx::new();
        let key = fx.ring.key(ProcessId(5));
        let sc = fx.sc(1, &cs("1"));
        let mut st = OddEpochState::new(1);
        st.sc = Some(sc);
        let pref = cs("1");
        st.tick(&fx.ctx(&key, 10), &pref, &[], &fx.store).unwrap();
        assert_eq!(st.timer(1), Some(Timer::Armed(13)));
        let out = st.tick(&fx.ctx(&key, 12), &pref, &[], &fx.store).unwrap();
        assert!(out.is_empty());
        let out = st.tick(&fx.ctx(&key, 13), &pref, &[], &fx.store).unwrap();
        assert_eq!(st.timer(1), Some(Timer::Fired));
        assert!(matches!(&out[..], [OddMsg::Vote(v)] if v.block.is_dummy()));
        let d = Arc::new(SimplexBlock::dummy(1, 1));
        let nb = Arc::new(NotarizedBlock { notarization: fx.notarize(&d), block: d });
        st.receive(&fx.ctx(&key, 14), ProcessId(0), &OddMsg::Notarized(nb)).unwrap();
        let out = st.tick(&fx.ctx(&key, 14), &pref, &[], &fx.store).unwrap();
        assert_eq!(st.h, 2);
        assert!(!out.iter().any(|m| matches!(m, OddMsg::Finalize(_))));
        assert_eq!(st.timer(2), Some(Timer::Armed(17)));
    }

    #[test]
    fn forged_messages_are_malformed() {
        let fx = Fx::new();
        let key = fx.ring.key(ProcessId(1));
        let ctx = fx.ctx(&key, 0);
        let mut st = OddEpochState::new(1);
        let mut m = fx.ring.key(ProcessId(2)).sign(Body::StartVote { epoch: 1, pref: cs("1") });
        assert!(st.receive(&ctx, ProcessId(3), &OddMsg::StartVote(m.clone())).is_err());
        m.tag = Digest([1; 32]);
        assert!(st.receive(&ctx, ProcessId(2), &OddMsg::StartVote(m)).is_err());
        let d = Arc::new(SimplexBlock::dummy(1, 1));
        let mut nz = (*fx.notarize(&d)).clone();
        nz.votes.truncate(8);
        let nb = Arc::new(NotarizedBlock { block: d, notarization: Arc::new(nz) });
        assert!(st.receive(&ctx, ProcessId(0), &OddMsg::Notarized(nb)).is_err());
    }

    /// Every process delivers every message at the next timeslot.
    fn run_synchronous(fx: &Fx, silent: &[usize], prefs: &[ChainString], horizon: Timeslot) -> Vec<OddEpochState> {
        let keys: Vec<SigningKey> = (0..N).map(|i| fx.ring.key(ProcessId(i))).collect();
        let mut states: Vec<OddEpochState> = (0..N).map(|_| OddEpochState::new(1)).collect();
        let mut inflight: Vec<(ProcessId, OddMsg)> = Vec::new();
        for t in 0..horizon {
            let delivered = std::mem::take(&mut inflight);
            for i in 0..N {
                if silent.contains(&i) {
                    continue;
                }
                let ctx = fx.ctx(&keys[i], t);
                for (from, m) in &delivered {
                    let fwd = states[i].receive(&ctx, *from, m).unwrap();
                    inflight.extend(fwd.into_iter().map(|m| (ProcessId(i), m)));
                }
                let out = states[i].tick(&ctx, &prefs[i], &[vec![i as u8]], &fx.store).unwrap();
                inflight.extend(out.into_iter().map(|m| (ProcessId(i), m)));
            }
        }
        states
    }

    #[test]
    fn synchronous_run_concludes_consistently() {
        let fx = Fx::new();
        let prefs: Vec<ChainString> = (0..N).map(|i| if i < 7 { cs("1101") } else { cs("1100") }).collect();
        let states = run_synchronous(&fx, &[], &prefs, 40);
        let fins: Vec<&ChainString> = states.iter().map(|s| &s.concluded.as_ref().expect("concluded").fin).collect();
        assert!(fins.iter().all(|f| *f == fins[0]));
        assert!(fins[0].starts_with(&cs("1101")));
        assert_eq!(fins[0].len(), 4 + 3 * 16);
    }

    #[test]
    fn silent_leader_is_skipped_with_a_dummy() {
        let fx = Fx::new();
        let prefs = vec![cs("1"); N];
        // lead(1) = p1 never speaks, so height 1 must notarize the dummy.
        let states = run_synchronous(&fx, &[1], &prefs, 60);
        let live: Vec<&OddEpochState> = states.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, s)| s).collect();
        let c = live[0].concluded.as_ref().expect("concluded");
        assert!(c.chain[0].is_dummy());
        assert!(live.iter().all(|s| s.concluded.as_ref().map(|x| &x.fin) == Some(&c.fin)));
    }

    #[test]
    fn conclusion_bridges_blocks_when_pref_is_a_block_boundary() {
        let fx = Fx::new();
        let pref = fx.store.genesis().hash().to_chain_string();
        let prefs = vec![pref.clone(); N];
        let states = run_synchronous(&fx, &[], &prefs, 40);
        let c = states[0].concluded.as_ref().unwrap();
        assert_eq!(c.bridged.len(), 3);
        let got = hash_concat_of(&c.bridged, &pref);
        assert_eq!(got, c.fin);
    }

    fn hash_concat_of(blocks: &[Block], start: &ChainString) -> ChainString {
        blocks.iter().fold(start.clone(), |acc, b| acc.concat(&b.hash().to_chain_string()))
    }
}
