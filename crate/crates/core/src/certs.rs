//! Signed messages and the certificates assembled from them.
//!
//! Signatures are simulated: each process holds a secret issued by the
//! [`KeyRing`], and a tag is a keyed digest of the message body. Only the ring
//! can verify, and only holders of a key can produce a valid tag for that id.

use std::collections::BTreeMap;

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chainstr::{threshold_frontier, ChainString};
use crate::digest::{Digest, DigestBuilder};
use crate::error::{Error, Result};
use crate::types::{Epoch, ProcessId};

/// `≥ ceil(n/5)` distinct stuck messages form an epoch certificate.
pub fn ec_threshold(n: usize) -> usize {
    n.div_ceil(5)
}

/// `≥ ceil(4n/5)` starting votes form a starting certificate.
pub fn sc_threshold(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// `> 4n/5` votes form a notarization or finalization.
pub fn quorum(n: usize) -> usize {
    4 * n / 5 + 1
}

/// Largest fault count satisfying `f < n/5`.
pub fn max_faults(n: usize) -> usize {
    n.div_ceil(5) - 1
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Stuck { epoch: Epoch, sigma: ChainString },
    StartVote { epoch: Epoch, pref: ChainString },
    /// `block` is the digest of the voted Simplex block (dummy or not).
    Vote { epoch: Epoch, height: u64, block: Digest },
    Finalize { epoch: Epoch, height: u64 },
    /// A leader's signature over its proposed block.
    Propose { epoch: Epoch, height: u64, block: Digest },
}

impl Body {
    pub fn epoch(&self) -> Epoch {
        match self {
            Body::Stuck { epoch, .. }
            | Body::StartVote { epoch, .. }
            | Body::Vote { epoch, .. }
            | Body::Finalize { epoch, .. }
            | Body::Propose { epoch, .. } => *epoch,
        }
    }

    pub fn digest(&self) -> Digest {
        let mut b = DigestBuilder::new("body");
        match self {
            Body::Stuck { epoch, sigma } => b.u64(0).u64(*epoch).digest(&sigma.digest()),
            Body::StartVote { epoch, pref } => b.u64(1).u64(*epoch).digest(&pref.digest()),
            Body::Vote { epoch, height, block } => b.u64(2).u64(*epoch).u64(*height).digest(block),
            Body::Finalize { epoch, height } => b.u64(3).u64(*epoch).u64(*height),
            Body::Propose { epoch, height, block } => b.u64(4).u64(*epoch).u64(*height).digest(block),
        };
        b.finish()
    }

    /// Votes sharing a key count toward the same certificate.
    fn key(&self) -> Option<BodyKey> {
        Some(match self {
            Body::Stuck { epoch, sigma } => BodyKey::Stuck(*epoch, sigma.clone()),
            Body::StartVote { epoch, .. } => BodyKey::Start(*epoch),
            Body::Vote { epoch, height, block } => BodyKey::Vote(*epoch, *height, *block),
            Body::Finalize { epoch, height } => BodyKey::Finalize(*epoch, *height),
            Body::Propose { .. } => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum BodyKey {
    Stuck(Epoch, ChainString),
    Start(Epoch),
    Vote(Epoch, u64, Digest),
    Finalize(Epoch, u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SignedMsg {
    pub signer: ProcessId,
    pub body: Body,
    #[serde(skip)]
    pub tag: Digest,
}

#[derive(Clone)]
pub struct SigningKey {
    id: ProcessId,
    secret: [u8; 32],
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKey({})", self.id)
    }
}

fn tag_for(secret: &[u8; 32], body: &Body) -> Digest {
    let mut b = DigestBuilder::new("sig");
    b.bytes(secret).digest(&body.digest());
    b.finish()
}

impl SigningKey {
    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn sign(&self, body: Body) -> SignedMsg {
        let tag = tag_for(&self.secret, &body);
        SignedMsg { signer: self.id, body, tag }
    }
}

#[derive(Debug)]
pub struct KeyRing {
    secrets: Vec<[u8; 32]>,
}

impl KeyRing {
    pub fn new(n: usize, seed: u64) -> Arc<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5349_474e_4b45_5953);
        let secrets = (0..n)
            .map(|_| {
                let mut s = [0u8; 32];
                rng.fill_bytes(&mut s);
                s
            })
            .collect();
        Arc::new(KeyRing { secrets })
    }

    pub fn n(&self) -> usize {
        self.secrets.len()
    }

    pub fn key(&self, id: ProcessId) -> SigningKey {
        SigningKey { id, secret: self.secrets[id.0] }
    }

    pub fn verify(&self, msg: &SignedMsg) -> bool {
        self.secrets
            .get(msg.signer.0)
            .is_some_and(|s| tag_for(s, &msg.body) == msg.tag)
    }
}

fn check_votes<'a>(
    ring: &KeyRing,
    votes: impl IntoIterator<Item = &'a SignedMsg>,
    threshold: usize,
    body_ok: impl Fn(&Body) -> bool,
) -> bool {
    let mut signers = HashSet::default();
    for v in votes {
        if !ring.verify(v) || !body_ok(&v.body) || !signers.insert(v.signer) {
            return false;
        }
    }
    signers.len() >= threshold
}

fn digest_votes(domain: &str, fields: &[u64], votes: &[SignedMsg]) -> Digest {
    let mut b = DigestBuilder::new(domain);
    for f in fields {
        b.u64(*f);
    }
    for v in votes {
        b.u64(v.signer.0 as u64).digest(&v.tag);
    }
    b.finish()
}

fn sorted(mut votes: Vec<SignedMsg>) -> Vec<SignedMsg> {
    votes.sort_by_key(|v| v.signer);
    votes
}

/// Stuck messages `(stuck, e, σ)` authorising entry into epoch `e + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EpochCertificate {
    /// The odd epoch this certificate lets processes enter.
    pub epoch: Epoch,
    pub sigma: ChainString,
    pub votes: Vec<SignedMsg>,
}

impl EpochCertificate {
    pub fn new(epoch: Epoch, sigma: ChainString, votes: Vec<SignedMsg>) -> Self {
        EpochCertificate { epoch, sigma, votes: sorted(votes) }
    }

    pub fn verify(&self, ring: &KeyRing) -> bool {
        self.epoch >= 1
            && check_votes(ring, &self.votes, ec_threshold(ring.n()), |b| {
                *b == Body::Stuck { epoch: self.epoch - 1, sigma: self.sigma.clone() }
            })
    }

    pub fn digest(&self) -> Digest {
        digest_votes("ec", &[self.epoch], &self.votes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StartingCertificate {
    pub epoch: Epoch,
    pub votes: Vec<SignedMsg>,
    #[serde(skip)]
    digest: Digest,
    pref: ChainString,
}

impl StartingCertificate {
    pub fn new(epoch: Epoch, votes: Vec<SignedMsg>) -> Self {
        let votes = sorted(votes);
        let digest = digest_votes("sc", &[epoch], &votes);
        let pref = majority_prefix(votes.iter().filter_map(|v| match &v.body {
            Body::StartVote { pref, .. } => Some(pref),
            _ => None,
        }));
        StartingCertificate { epoch, votes, digest, pref }
    }

    pub fn verify(&self, ring: &KeyRing) -> bool {
        check_votes(ring, &self.votes, sc_threshold(ring.n()), |b| {
            matches!(b, Body::StartVote { epoch, .. } if *epoch == self.epoch)
        })
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    /// `Pref(C)`.
    pub fn pref(&self) -> &ChainString {
        &self.pref
    }
}

/// Longest `σ` extended by strictly more than half of `prefs`.
fn majority_prefix<'a>(prefs: impl IntoIterator<Item = &'a ChainString>) -> ChainString {
    let prefs: Vec<&ChainString> = prefs.into_iter().collect();
    if prefs.is_empty() {
        return ChainString::new();
    }
    let frontier = threshold_frontier(prefs.iter().copied(), prefs.len() / 2 + 1);
    assert_eq!(frontier.len(), 1, "majority prefixes must form a chain");
    frontier.into_iter().next().unwrap()
}

/// `Pref(C)`: the longest σ extended by more than half of the votes in `C`.
pub fn pref_of_sc(c: &StartingCertificate) -> ChainString {
    c.pref.clone()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Notarization {
    pub epoch: Epoch,
    pub height: u64,
    pub block: Digest,
    pub votes: Vec<SignedMsg>,
}

impl Notarization {
    pub fn verify(&self, ring: &KeyRing) -> bool {
        check_votes(ring, &self.votes, quorum(ring.n()), |b| {
            *b == Body::Vote { epoch: self.epoch, height: self.height, block: self.block }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finalization {
    pub epoch: Epoch,
    pub height: u64,
    pub votes: Vec<SignedMsg>,
}

impl Finalization {
    pub fn verify(&self, ring: &KeyRing) -> bool {
        check_votes(ring, &self.votes, quorum(ring.n()), |b| {
            *b == Body::Finalize { epoch: self.epoch, height: self.height }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Certificate {
    Epoch(EpochCertificate),
    Starting(StartingCertificate),
    Notarization(Notarization),
    Finalization(Finalization),
}

/// Per-process vote collection with distinct-signer thresholds.
#[derive(Debug, Default, Clone)]
pub struct CertAccumulator {
    pending: HashMap<BodyKey, BTreeMap<ProcessId, SignedMsg>>,
    done: HashSet<BodyKey>,
}

impl CertAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `msg` and returns the certificate it completes, the first time
    /// the threshold is reached for its key.
    pub fn accumulate(&mut self, msg: SignedMsg, n: usize) -> Result<Option<Certificate>> {
        if msg.signer.0 >= n {
            return Err(Error::Malformed { from: msg.signer, reason: format!("signer outside 0..{n}") });
        }
        if let Body::Stuck { epoch, .. } = &msg.body {
            if epoch % 2 == 1 {
                return Err(Error::Malformed { from: msg.signer, reason: "stuck message for an odd epoch".into() });
            }
        }
        let Some(key) = msg.body.key() else {
            return Err(Error::Malformed { from: msg.signer, reason: "proposals are not accumulated".into() });
        };
        if self.done.contains(&key) {
            return Ok(None);
        }
        let votes = self.pending.entry(key.clone()).or_default();
        votes.entry(msg.signer).or_insert(msg);
        let threshold = match key {
            BodyKey::Stuck(..) => ec_threshold(n),
            BodyKey::Start(..) => sc_threshold(n),
            BodyKey::Vote(..) | BodyKey::Finalize(..) => quorum(n),
        };
        if votes.len() < threshold {
            return Ok(None);
        }
        let votes: Vec<SignedMsg> = self.pending.remove(&key).unwrap().into_values().collect();
        self.done.insert(key.clone());
        Ok(Some(match key {
            BodyKey::Stuck(e, sigma) => Certificate::Epoch(EpochCertificate::new(e + 1, sigma, votes)),
            BodyKey::Start(e) => Certificate::Starting(StartingCertificate::new(e, votes)),
            BodyKey::Vote(epoch, height, block) => {
                Certificate::Notarization(Notarization { epoch, height, block, votes })
            }
            BodyKey::Finalize(epoch, height) => Certificate::Finalization(Finalization { epoch, height, votes }),
        }))
    }

    /// Number of distinct signers recorded for the vote `(e, h, block)`.
    pub fn vote_count(&self, epoch: Epoch, height: u64, block: Digest) -> usize {
        self.pending.get(&BodyKey::Vote(epoch, height, block)).map_or(0, |v| v.len())
    }

    /// Forgets every pending vote for epochs below `epoch`.
    pub fn prune_below(&mut self, epoch: Epoch) {
        let keep = |k: &BodyKey| match k {
            BodyKey::Stuck(e, _) | BodyKey::Start(e) | BodyKey::Vote(e, ..) | BodyKey::Finalize(e, _) => {
                *e >= epoch
            }
        };
        self.pending.retain(|k, _| keep(k));
        self.done.retain(keep);
    }
}
