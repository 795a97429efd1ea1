//! The per-process shell: one block store, an even and an odd machine, and the
//! rules for routing messages between epochs.

use std::collections::{BTreeMap, VecDeque};

use rustc_hash::FxHashMap as HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::certs::{Body, CertAccumulator, Certificate, EpochCertificate, KeyRing, SignedMsg, SigningKey};
use crate::chainstr::{Block, BlockStore, ChainString, SharedOracle};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::params::ProtocolParams;
use crate::simplex_odd::{OddCtx, OddEpochState, OddEvent, OddMsg};
use crate::snowman_even::{EvenCtx, EvenEpochState, EvenEvent, EvenOut, MintPolicy, SampleRequest, SampleResponse};
use crate::types::{is_odd, Epoch, ProcessId, Timeslot};

#[derive(Debug, Clone)]
pub enum Payload {
    SampleRequest(SampleRequest),
    SampleResponse(Arc<SampleResponse>),
    Stuck(SignedMsg),
    EpochCert(Arc<EpochCertificate>),
    Odd(OddMsg),
}

impl Payload {
    /// The epoch in which a receiver acts on this message.
    pub fn epoch(&self) -> Epoch {
        match self {
            Payload::SampleRequest(r) => r.epoch,
            Payload::SampleResponse(r) => r.epoch,
            Payload::Stuck(m) => m.body.epoch(),
            Payload::EpochCert(ec) => ec.epoch.saturating_sub(1),
            Payload::Odd(m) => m.epoch(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::SampleRequest(_) => "sample_request",
            Payload::SampleResponse(_) => "sample_response",
            Payload::Stuck(_) => "stuck",
            Payload::EpochCert(_) => "epoch_cert",
            Payload::Odd(OddMsg::StartVote(_)) => "start_vote",
            Payload::Odd(OddMsg::Propose(_)) => "propose",
            Payload::Odd(OddMsg::Vote(_)) => "vote",
            Payload::Odd(OddMsg::Finalize(_)) => "finalize",
            Payload::Odd(OddMsg::Notarized(_)) => "notarization",
            Payload::Odd(OddMsg::Finalized(_)) => "finalization",
        }
    }

    /// A short content digest for traces.
    pub fn digest(&self) -> Digest {
        use crate::digest::DigestBuilder;
        let mut b = DigestBuilder::new("payload");
        match self {
            Payload::SampleRequest(r) => b.u64(0).u64(r.epoch).u64(r.round),
            Payload::SampleResponse(r) => b
                .u64(1)
                .u64(r.epoch)
                .u64(r.round)
                .digest(&r.chain.hashes().digest())
                .digest(&r.lock.digest())
                .digest(&r.fin.digest()),
            Payload::Stuck(m) => b.u64(2).digest(&m.tag),
            Payload::EpochCert(ec) => b.u64(3).digest(&ec.digest()),
            Payload::Odd(OddMsg::StartVote(m)) | Payload::Odd(OddMsg::Finalize(m)) => b.u64(4).digest(&m.tag),
            Payload::Odd(OddMsg::Propose(p)) => b.u64(5).digest(&p.signed.tag),
            Payload::Odd(OddMsg::Vote(v)) => b.u64(6).digest(&v.signed.tag),
            Payload::Odd(OddMsg::Notarized(nb)) => b.u64(7).digest(&nb.block.digest()),
            Payload::Odd(OddMsg::Finalized(f)) => b.u64(8).u64(f.epoch).u64(f.height),
        };
        b.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    /// Every process, the sender included.
    All,
    One(ProcessId),
}

#[derive(Debug, Clone)]
pub struct Send {
    pub to: Dest,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    EpochEntered { epoch: Epoch },
    EcFormed { epoch: Epoch },
    Even(EvenEvent),
    Odd(OddEvent),
    Dropped { from: ProcessId, reason: String },
}

#[derive(Debug)]
pub struct Node {
    pub id: ProcessId,
    key: SigningKey,
    ring: Arc<KeyRing>,
    params: ProtocolParams,
    mint: MintPolicy,
    oracle: SharedOracle,
    pub store: BlockStore,
    rng: ChaCha8Rng,
    pub epoch: Epoch,
    pub even: EvenEpochState,
    pub odd: Option<OddEpochState>,
    stuck_acc: CertAccumulator,
    ec_seen: HashMap<Digest, bool>,
    /// Messages for epochs this process has not reached yet.
    buffer: BTreeMap<Epoch, Vec<(ProcessId, Payload)>>,
    requests: Vec<(ProcessId, SampleRequest)>,
    responses: Vec<(ProcessId, Arc<SampleResponse>)>,
    pub events: Vec<(Epoch, NodeEvent)>,
}

impl Node {
    pub fn new(
        id: ProcessId,
        params: ProtocolParams,
        ring: Arc<KeyRing>,
        oracle: SharedOracle,
        mint: MintPolicy,
        seed: u64,
    ) -> Result<Self> {
        let genesis = Block::genesis(&oracle)?;
        let g = genesis.hash().to_chain_string();
        let mut even = EvenEpochState::new(&g);
        even.init_epoch(0);
        let mut seed_bytes = [0u8; 32];
        seed_bytes[..8].copy_from_slice(&seed.to_le_bytes());
        seed_bytes[8..16].copy_from_slice(&(id.0 as u64).to_le_bytes());
        Ok(Node {
            id,
            key: ring.key(id),
            ring,
            params,
            mint,
            oracle,
            store: BlockStore::new(genesis),
            rng: ChaCha8Rng::from_seed(seed_bytes),
            epoch: 0,
            even,
            odd: None,
            stuck_acc: CertAccumulator::new(),
            ec_seen: HashMap::default(),
            buffer: BTreeMap::new(),
            requests: Vec::new(),
            responses: Vec::new(),
            events: vec![(0, NodeEvent::EpochEntered { epoch: 0 })],
        })
    }

    pub fn key(&self) -> &SigningKey {
        &self.key
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    /// The process's `final`, carried across epochs.
    pub fn final_value(&self) -> &ChainString {
        &self.even.final_
    }

    pub fn pref(&self) -> &ChainString {
        &self.even.pref
    }

    pub fn buffered(&self) -> usize {
        self.buffer.values().map(Vec::len).sum()
    }

    fn log(&mut self, ev: NodeEvent) {
        self.events.push((self.epoch, ev));
    }

    fn drain_machine_events(&mut self) {
        let e = self.epoch;
        let even: Vec<_> = self.even.events.drain(..).map(|ev| (e, NodeEvent::Even(ev))).collect();
        self.events.extend(even);
        if let Some(odd) = &mut self.odd {
            let evs: Vec<_> = odd.events.drain(..).map(|ev| (e, NodeEvent::Odd(ev))).collect();
            self.events.extend(evs);
        }
    }

    fn enter_epoch(&mut self, epoch: Epoch) {
        debug_assert!(epoch > self.epoch);
        self.epoch = epoch;
        self.requests.clear();
        self.responses.clear();
        if is_odd(epoch) {
            self.even.leave_epoch();
            self.odd = Some(OddEpochState::new(epoch));
        } else {
            self.odd = None;
            self.even.init_epoch(epoch);
        }
        self.stuck_acc.prune_below(epoch);
        self.log(NodeEvent::EpochEntered { epoch });
    }

    fn ec_ok(&mut self, ec: &EpochCertificate) -> bool {
        let ring = &self.ring;
        *self.ec_seen.entry(ec.digest()).or_insert_with(|| ec.verify(ring))
    }

    /// Acts on one message for the current epoch. Returns sends it triggers.
    fn handle(&mut self, t: Timeslot, from: ProcessId, payload: Payload) -> Result<Vec<Send>> {
        let mut out = Vec::new();
        match payload {
            Payload::SampleRequest(r) => self.requests.push((from, r)),
            Payload::SampleResponse(r) => self.responses.push((from, r)),
            Payload::Stuck(m) => {
                if m.signer != from || !self.ring.verify(&m) || !matches!(m.body, Body::Stuck { .. }) {
                    return Err(Error::Malformed { from, reason: "bad stuck message".into() });
                }
                if is_odd(self.epoch) {
                    return Ok(out);
                }
                if let Some(Certificate::Epoch(ec)) = self.stuck_acc.accumulate(m, self.params.n)? {
                    let ec = Arc::new(ec);
                    self.ec_seen.insert(ec.digest(), true);
                    self.log(NodeEvent::EcFormed { epoch: ec.epoch });
                    out.push(Send { to: Dest::All, payload: Payload::EpochCert(ec.clone()) });
                    self.enter_epoch(ec.epoch);
                }
            }
            Payload::EpochCert(ec) => {
                if !self.ec_ok(&ec) {
                    return Err(Error::Malformed { from, reason: "bad epoch certificate".into() });
                }
                if !is_odd(self.epoch) && ec.epoch == self.epoch + 1 {
                    out.push(Send { to: Dest::All, payload: Payload::EpochCert(ec.clone()) });
                    self.enter_epoch(ec.epoch);
                }
            }
            Payload::Odd(m) => {
                let Some(odd) = &mut self.odd else { return Ok(out) };
                let ctx = OddCtx {
                    id: self.id,
                    key: &self.key,
                    ring: &self.ring,
                    params: &self.params,
                    oracle: &self.oracle,
                    t,
                };
                let fwd = odd.receive(&ctx, from, &m)?;
                out.extend(fwd.into_iter().map(|m| Send { to: Dest::All, payload: Payload::Odd(m) }));
            }
        }
        Ok(out)
    }

    /// Routes `payload` by epoch: acts now, buffers, or drops.
    fn route(&mut self, t: Timeslot, from: ProcessId, payload: Payload, out: &mut Vec<Send>) -> Result<()> {
        let pe = payload.epoch();
        if pe > self.epoch {
            self.buffer.entry(pe).or_default().push((from, payload));
            return Ok(());
        }
        if pe < self.epoch {
            return Ok(());
        }
        match self.handle(t, from, payload) {
            Ok(sends) => out.extend(sends),
            Err(Error::Malformed { from, reason }) => self.log(NodeEvent::Dropped { from, reason }),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn even_pass(&mut self, t: Timeslot) -> Result<Vec<Send>> {
        let requests = std::mem::take(&mut self.requests);
        let responses = std::mem::take(&mut self.responses);
        let mut ctx = EvenCtx {
            id: self.id,
            params: &self.params,
            store: &mut self.store,
            rng: &mut self.rng,
            oracle: &self.oracle,
            mint: &self.mint,
            t,
        };
        let outs = self.even.step(&mut ctx, &responses, &requests)?;
        let epoch = self.epoch;
        Ok(outs
            .into_iter()
            .map(|o| match o {
                EvenOut::Request { to, req } => Send { to: Dest::One(to), payload: Payload::SampleRequest(req) },
                EvenOut::Response { to, resp } => Send { to: Dest::One(to), payload: Payload::SampleResponse(resp) },
                EvenOut::Stuck { sigma } => {
                    Send { to: Dest::All, payload: Payload::Stuck(self.key.sign(Body::Stuck { epoch, sigma })) }
                }
            })
            .collect())
    }

    /// Returns true if the odd epoch concluded.
    fn odd_pass(&mut self, t: Timeslot, out: &mut Vec<Send>) -> Result<bool> {
        let odd = self.odd.as_mut().expect("odd machine present in odd epoch");
        let ctx = OddCtx { id: self.id, key: &self.key, ring: &self.ring, params: &self.params, oracle: &self.oracle, t };
        let mut tx = Vec::with_capacity(16);
        tx.extend_from_slice(&(self.id.0 as u64).to_le_bytes());
        tx.extend_from_slice(&self.epoch.to_le_bytes());
        let sends = odd.tick(&ctx, &self.even.pref, &[tx], &self.store)?;
        out.extend(sends.into_iter().map(|m| Send { to: Dest::All, payload: Payload::Odd(m) }));
        let Some(c) = odd.concluded.clone() else { return Ok(false) };
        for b in c.bridged {
            self.store.insert(b);
        }
        self.even.final_ = c.fin;
        Ok(true)
    }

    /// One timeslot: route `delivered`, then run the active machine. Epoch
    /// changes take effect immediately, so a process may pass through several
    /// epochs in one step.
    pub fn step(&mut self, t: Timeslot, delivered: Vec<(ProcessId, Payload)>) -> Result<Vec<Send>> {
        let mut out = Vec::new();
        let mut queue: VecDeque<(ProcessId, Payload)> = delivered.into();
        loop {
            let mut entered = self.epoch;
            if let Some(b) = self.buffer.remove(&self.epoch) {
                queue.extend(b);
            }
            while let Some((from, p)) = queue.pop_front() {
                self.route(t, from, p, &mut out)?;
                if self.epoch != entered {
                    entered = self.epoch;
                    if let Some(b) = self.buffer.remove(&self.epoch) {
                        queue.extend(b);
                    }
                }
            }
            if !is_odd(self.epoch) {
                out.extend(self.even_pass(t)?);
                self.drain_machine_events();
                return Ok(out);
            }
            let concluded = self.odd_pass(t, &mut out)?;
            self.drain_machine_events();
            if !concluded {
                return Ok(out);
            }
            let next = self.epoch + 1;
            self.enter_epoch(next);
        }
    }
}
