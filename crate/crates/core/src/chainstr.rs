//! Chain strings, blocks and the per-process block store.
//!
//! A [`ChainString`] is a finite bit string that names (an initial segment of)
//! the concatenation `H(b0) * H(b1) * ...` of block hashes along a chain. The
//! store resolves such strings back to the longest chain of known blocks.

use std::cmp::Ordering;
use rustc_hash::FxHashMap as HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::digest::{Digest, DigestBuilder};
use crate::error::{Error, Result};
use crate::types::ProcessId;

/// Bit string packed most-significant-bit first into 64-bit words.
///
/// Bits past `len` are always zero, so derived equality is exact. The words
/// are shared between clones and copied on the first write.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct ChainString {
    words: Arc<Vec<u64>>,
    len: usize,
}

impl ChainString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut s = Self::new();
        for &b in bits {
            s.push(b);
        }
        s
    }

    /// Parses a string of `0`/`1` characters; anything else is rejected.
    pub fn parse(text: &str) -> Option<Self> {
        let mut s = Self::new();
        for c in text.chars() {
            match c {
                '0' => s.push(false),
                '1' => s.push(true),
                _ => return None,
            }
        }
        Some(s)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        (self.words[i / 64] >> (63 - i % 64)) & 1 == 1
    }

    /// Bits `pos .. pos + n` as an integer, most significant first. `n ≤ 64`.
    pub fn read_bits(&self, pos: usize, n: usize) -> u64 {
        assert!(n <= 64 && pos + n <= self.len, "bits {pos}+{n} out of range for length {}", self.len);
        if n == 0 {
            return 0;
        }
        let (w, off) = (pos / 64, pos % 64);
        let mut x = self.words[w] << off;
        if off + n > 64 {
            x |= self.words[w + 1] >> (64 - off);
        }
        x >> (64 - n)
    }

    pub fn push(&mut self, bit: bool) {
        let words = Arc::make_mut(&mut self.words);
        if self.len % 64 == 0 {
            words.push(0);
        }
        if bit {
            let i = self.len;
            words[i / 64] |= 1 << (63 - i % 64);
        }
        self.len += 1;
    }

    /// Appends the low `nbits` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, nbits: u32) {
        debug_assert!(nbits <= 64);
        for i in (0..nbits).rev() {
            self.push((value >> i) & 1 == 1);
        }
    }

    pub fn push_hash(&mut self, h: HashValue) {
        self.push_bits(h.value, h.bits);
    }

    pub fn with_bit(&self, bit: bool) -> Self {
        let mut s = self.clone();
        s.push(bit);
        s
    }

    pub fn concat(&self, other: &ChainString) -> Self {
        let mut s = self.clone();
        for i in 0..other.len {
            s.push(other.bit(i));
        }
        s
    }

    /// Makes room for `additional` more bits without reallocating.
    pub fn reserve(&mut self, additional: usize) {
        let need = (self.len + additional).div_ceil(64);
        let words = Arc::make_mut(&mut self.words);
        words.reserve(need.saturating_sub(words.len()));
    }

    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        self.len = len;
        let n = len.div_ceil(64);
        let words = match Arc::get_mut(&mut self.words) {
            Some(w) => {
                w.truncate(n);
                w
            }
            None => {
                self.words = Arc::new(self.words[..n].to_vec());
                Arc::get_mut(&mut self.words).expect("fresh")
            }
        };
        if len % 64 != 0 {
            let keep = len % 64;
            let last = words.len() - 1;
            words[last] &= !(u64::MAX >> keep);
        }
    }

    /// The initial segment of length `len` (or the whole string if shorter).
    pub fn prefix(&self, len: usize) -> Self {
        let mut s = self.clone();
        s.truncate(len);
        s
    }

    /// Bits `from..` as a new string.
    pub fn suffix_from(&self, from: usize) -> Self {
        let mut s = Self::new();
        for i in from..self.len {
            s.push(self.bit(i));
        }
        s
    }

    /// Length of the longest common prefix.
    pub fn lcp(&self, other: &ChainString) -> usize {
        let min = self.len.min(other.len);
        if Arc::ptr_eq(&self.words, &other.words) {
            return min;
        }
        let nwords = min.div_ceil(64);
        for i in 0..nwords {
            let x = self.words[i] ^ other.words[i];
            if x != 0 {
                return (i * 64 + x.leading_zeros() as usize).min(min);
            }
        }
        min
    }

    /// True iff `prefix` is an initial segment of `self`.
    pub fn starts_with(&self, prefix: &ChainString) -> bool {
        prefix.len <= self.len && self.lcp(prefix) == prefix.len
    }

    pub fn digest(&self) -> Digest {
        let mut b = DigestBuilder::new("chainstr");
        b.u64(self.len as u64);
        for w in self.words.iter() {
            b.u64(*w);
        }
        b.finish()
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len)
            .map(|i| if self.bit(i) { '1' } else { '0' })
            .collect()
    }
}

/// `prefix ⊆ value` in prefix order.
pub fn extends(prefix: &ChainString, value: &ChainString) -> bool {
    value.starts_with(prefix)
}

/// Lexicographic order in which a proper prefix sorts before its extensions.
impl Ord for ChainString {
    fn cmp(&self, other: &Self) -> Ordering {
        let l = self.lcp(other);
        if l == self.len || l == other.len {
            self.len.cmp(&other.len)
        } else {
            self.bit(l).cmp(&other.bit(l))
        }
    }
}

/// Hashes the length and the last few words only. Strings used as map keys
/// share long prefixes, so the tail is what tells them apart.
impl std::hash::Hash for ChainString {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.len.hash(state);
        let from = self.words.len().saturating_sub(4);
        self.words[from..].hash(state);
    }
}

impl PartialOrd for ChainString {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for ChainString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 96 {
            write!(f, "ChainString({:?})", self.to_bit_string())
        } else {
            write!(f, "ChainString(len={}, {})", self.len, self.digest().short())
        }
    }
}

impl fmt::Display for ChainString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

impl Serialize for ChainString {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bit_string())
    }
}

impl<'de> Deserialize<'de> for ChainString {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ChainString::parse(&text).ok_or_else(|| serde::de::Error::custom("expected a string of 0/1"))
    }
}

/// Maximal strings extended by at least `threshold` of `values`.
///
/// The set `{σ : |{v : σ ⊆ v}| ≥ threshold}` is prefix-closed; this returns its
/// maximal elements in lexicographic order. For `threshold > values.len() / 2`
/// there is at most one. Empty when fewer than `threshold` values are given.
pub fn threshold_frontier<'a, I>(values: I, threshold: usize) -> Vec<ChainString>
where
    I: IntoIterator<Item = &'a ChainString>,
{
    threshold_frontier_weighted(values.into_iter().map(|v| (v, 1)), threshold)
}

/// [`threshold_frontier`] over values carrying multiplicities.
pub fn threshold_frontier_weighted<'a, I>(values: I, threshold: usize) -> Vec<ChainString>
where
    I: IntoIterator<Item = (&'a ChainString, usize)>,
{
    let mut sorted: Vec<(&ChainString, usize)> = values.into_iter().filter(|(_, w)| *w > 0).collect();
    let total: usize = sorted.iter().map(|(_, w)| w).sum();
    if threshold == 0 || total < threshold {
        return Vec::new();
    }
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    // Strings extending σ form a contiguous run in sorted order, and the common
    // prefix of a run is the lcp of its two ends. Runs starting part way into a
    // repeated value only give shorter prefixes of the same candidate.
    let mut cands: Vec<ChainString> = Vec::new();
    let mut j = 0;
    let mut acc = 0;
    for i in 0..sorted.len() {
        if j < i {
            j = i;
            acc = 0;
        }
        while acc < threshold && j < sorted.len() {
            acc += sorted[j].1;
            j += 1;
        }
        if acc < threshold {
            break;
        }
        let (a, b) = (sorted[i].0, sorted[j - 1].0);
        cands.push(a.prefix(a.lcp(b)));
        acc -= sorted[i].1;
    }
    cands.sort();
    cands.dedup();
    let maximal: Vec<ChainString> = cands
        .iter()
        .filter(|c| !cands.iter().any(|o| o.len() > c.len() && o.starts_with(c)))
        .cloned()
        .collect();
    maximal
}

/// An `L`-bit block hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HashValue {
    pub value: u64,
    pub bits: u32,
}

impl HashValue {
    pub fn to_chain_string(self) -> ChainString {
        let mut s = ChainString::new();
        s.push_hash(self);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HashBackend {
    /// Unique random values per distinct block content.
    #[default]
    Oracle,
    /// SHA-256 of the block content truncated to `L` bits, with a collision audit.
    Sha256Truncated,
}

/// Maps block-content digests to `L`-bit hash values.
///
/// Shared by every process in a run, since `H` is a single global function.
#[derive(Debug)]
pub struct HashOracle {
    backend: HashBackend,
    bits: u32,
    assigned: HashMap<Digest, u64>,
    used: HashMap<u64, Digest>,
    rng: ChaCha8Rng,
}

pub type SharedOracle = Arc<Mutex<HashOracle>>;

impl HashOracle {
    pub fn new(backend: HashBackend, bits: u32, seed: u64) -> Result<Self> {
        if bits == 0 || bits > 64 {
            return Err(Error::InvalidParams(format!("hash bits must be in 1..=64, got {bits}")));
        }
        Ok(HashOracle {
            backend,
            bits,
            assigned: HashMap::default(),
            used: HashMap::default(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4841_5348_4f52_4143),
        })
    }

    pub fn shared(backend: HashBackend, bits: u32, seed: u64) -> Result<SharedOracle> {
        Ok(Arc::new(Mutex::new(Self::new(backend, bits, seed)?)))
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    fn mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    pub fn hash(&mut self, content: &Digest) -> Result<HashValue> {
        if let Some(&v) = self.assigned.get(content) {
            return Ok(HashValue { value: v, bits: self.bits });
        }
        let value = match self.backend {
            HashBackend::Oracle => {
                if self.bits < 64 && self.used.len() as u64 >= (1u64 << self.bits) {
                    return Err(Error::HashSpaceExhausted { bits: self.bits });
                }
                loop {
                    let v = self.rng.gen::<u64>() & self.mask();
                    if !self.used.contains_key(&v) {
                        break v;
                    }
                }
            }
            HashBackend::Sha256Truncated => {
                let v = if self.bits == 64 {
                    content.prefix_u64()
                } else {
                    content.prefix_u64() >> (64 - self.bits)
                };
                if self.used.contains_key(&v) {
                    return Err(Error::HashCollision { value: v, bits: self.bits });
                }
                v
            }
        };
        self.assigned.insert(*content, value);
        self.used.insert(value, *content);
        Ok(HashValue { value, bits: self.bits })
    }

    /// Number of distinct blocks hashed so far; all values are distinct.
    pub fn assigned(&self) -> usize {
        self.assigned.len()
    }
}

pub fn hash_content(oracle: &SharedOracle, content: &Digest) -> Result<HashValue> {
    oracle.lock().expect("hash oracle poisoned").hash(content)
}

#[derive(Debug, PartialEq, Eq)]
pub struct BlockData {
    /// Content digest; doubles as the block's opaque unique id.
    pub id: Digest,
    pub hash: HashValue,
    /// `None` only for genesis.
    pub parent: Option<HashValue>,
    pub height: u64,
    pub txs: Vec<Vec<u8>>,
}

/// Cheaply clonable handle to an immutable block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block(Arc<BlockData>);

impl Block {
    pub fn genesis(oracle: &SharedOracle) -> Result<Block> {
        let id = Digest::of("genesis", &[]);
        let hash = hash_content(oracle, &id)?;
        Ok(Block(Arc::new(BlockData { id, hash, parent: None, height: 0, txs: Vec::new() })))
    }

    /// A block with the given content; its hash comes from the oracle.
    pub fn with_content(
        oracle: &SharedOracle,
        parent: &Block,
        tag: &[u8],
        txs: Vec<Vec<u8>>,
    ) -> Result<Block> {
        let mut b = DigestBuilder::new("block");
        b.u64(parent.hash().value).bytes(tag).u64(txs.len() as u64);
        for tx in &txs {
            b.bytes(tx);
        }
        let id = b.finish();
        let hash = hash_content(oracle, &id)?;
        Ok(Block(Arc::new(BlockData {
            id,
            hash,
            parent: Some(parent.hash()),
            height: parent.height() + 1,
            txs,
        })))
    }

    /// A block with a given content digest, e.g. one carried over from an odd epoch.
    pub fn with_id(oracle: &SharedOracle, parent: &Block, id: Digest, txs: Vec<Vec<u8>>) -> Result<Block> {
        let hash = hash_content(oracle, &id)?;
        Ok(Block(Arc::new(BlockData {
            id,
            hash,
            parent: Some(parent.hash()),
            height: parent.height() + 1,
            txs,
        })))
    }

    pub fn id(&self) -> Digest {
        self.0.id
    }
    pub fn hash(&self) -> HashValue {
        self.0.hash
    }
    pub fn parent(&self) -> Option<HashValue> {
        self.0.parent
    }
    pub fn height(&self) -> u64 {
        self.0.height
    }
    pub fn txs(&self) -> &[Vec<u8>] {
        &self.0.txs
    }
}

/// Mints a fresh child of `parent`. The result is a pure function of
/// `(creator, counter, payload)` and the parent, so replays reproduce it.
pub fn mint_child(
    oracle: &SharedOracle,
    parent: &Block,
    creator: ProcessId,
    counter: u64,
    payload: Vec<Vec<u8>>,
) -> Result<Block> {
    let mut tag = Vec::with_capacity(16);
    tag.extend_from_slice(&(creator.0 as u64).to_be_bytes());
    tag.extend_from_slice(&counter.to_be_bytes());
    Block::with_content(oracle, parent, &tag, payload)
}

/// `H_B`: the concatenated hashes if `blocks` is a parent-linked chain from
/// genesis, else the empty string.
pub fn hash_concat(blocks: &[Block], genesis: HashValue) -> ChainString {
    let linked = blocks.first().is_some_and(|b| b.hash() == genesis && b.parent().is_none())
        && blocks.windows(2).all(|w| w[1].parent() == Some(w[0].hash()));
    if !linked {
        return ChainString::new();
    }
    let mut s = ChainString::new();
    for b in blocks {
        s.push_hash(b.hash());
    }
    s
}

/// A sequence of blocks together with its `H_B`, computed once on construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockChain {
    blocks: Vec<Block>,
    hashes: ChainString,
}

impl BlockChain {
    pub fn new(blocks: Vec<Block>, genesis: HashValue) -> Self {
        let hashes = hash_concat(&blocks, genesis);
        BlockChain { blocks, hashes }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// `H_B`; empty when the blocks do not form a chain from genesis.
    pub fn hashes(&self) -> &ChainString {
        &self.hashes
    }

    pub fn is_chain(&self) -> bool {
        !self.hashes.is_empty()
    }

    pub fn last(&self) -> Option<&Block> {
        self.blocks.last()
    }
}

/// Result of resolving a chain string against a store.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub last: Block,
    /// `|reduct(σ)|`; `reduct(σ)` is `σ[..reduct_len]` except in the genesis
    /// fallback, where `σ` may not even start with `H(b0)`.
    pub reduct_len: usize,
    /// Whether `reduct(σ)` is an initial segment of `σ`.
    pub matched: bool,
}

#[derive(Debug, Clone)]
struct Entry {
    block: Block,
    arrival: u64,
}

#[derive(Debug, Clone)]
pub struct BlockStore {
    genesis: Block,
    entries: HashMap<HashValue, Entry>,
    children: HashMap<HashValue, Vec<HashValue>>,
    next_arrival: u64,
    chains: HashMap<HashValue, Arc<BlockChain>>,
}

impl BlockStore {
    pub fn new(genesis: Block) -> Self {
        let mut entries = HashMap::default();
        entries.insert(genesis.hash(), Entry { block: genesis.clone(), arrival: 0 });
        let mut chains = HashMap::default();
        chains.insert(genesis.hash(), Arc::new(BlockChain::new(vec![genesis.clone()], genesis.hash())));
        BlockStore { genesis, entries, children: HashMap::default(), next_arrival: 1, chains }
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    pub fn hash_bits(&self) -> u32 {
        self.genesis.hash().bits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, h: HashValue) -> bool {
        self.entries.contains_key(&h)
    }

    pub fn get(&self, h: HashValue) -> Option<&Block> {
        self.entries.get(&h).map(|e| &e.block)
    }

    pub fn arrival(&self, h: HashValue) -> Option<u64> {
        self.entries.get(&h).map(|e| e.arrival)
    }

    /// Adds a block whose parent is already stored. Returns `false` if the
    /// block was already present or its parent is unknown.
    pub fn insert(&mut self, block: Block) -> bool {
        let Some(parent) = block.parent() else { return false };
        if self.entries.contains_key(&block.hash()) || !self.entries.contains_key(&parent) {
            return false;
        }
        let h = block.hash();
        self.entries.insert(h, Entry { block, arrival: self.next_arrival });
        self.next_arrival += 1;
        self.children.entry(parent).or_default().push(h);
        true
    }

    /// Adds every block of a valid chain. Returns the number of new blocks.
    pub fn insert_chain(&mut self, chain: &BlockChain) -> usize {
        if !chain.is_chain() || chain.blocks()[0].hash() != self.genesis.hash() {
            return 0;
        }
        // Ancestors of a known block are known, so only the unknown tail matters.
        let known = chain.blocks().iter().rposition(|b| self.contains(b.hash())).unwrap_or(0);
        chain.blocks()[known + 1..].iter().filter(|b| self.insert((*b).clone())).count()
    }

    /// Children of `h` in arrival order.
    pub fn children(&self, h: HashValue) -> impl Iterator<Item = &Block> + '_ {
        self.children
            .get(&h)
            .into_iter()
            .flatten()
            .map(move |c| &self.entries[c].block)
    }

    /// The chain `b0 .. b` for a stored block, memoised.
    pub fn chain_to(&mut self, h: HashValue) -> Option<Arc<BlockChain>> {
        if let Some(c) = self.chains.get(&h) {
            return Some(c.clone());
        }
        let block = self.get(h)?.clone();
        let parent = self.chain_to(block.parent()?)?;
        let mut blocks = parent.blocks().to_vec();
        blocks.push(block);
        let chain = Arc::new(BlockChain::new(blocks, self.genesis.hash()));
        self.chains.insert(h, chain.clone());
        Some(chain)
    }

    /// `last(σ)` and `|reduct(σ)|`: the greatest `h` such that
    /// `σ = H(b0) * .. * H(bh) * τ` for stored `b0 .. bh`.
    pub fn resolve(&self, sigma: &ChainString) -> Resolution {
        let bits = self.hash_bits() as usize;
        let g = self.genesis.hash().to_chain_string();
        if !sigma.starts_with(&g) {
            return Resolution { last: self.genesis.clone(), reduct_len: bits, matched: false };
        }
        let mut last = &self.genesis;
        let mut pos = bits;
        while pos + bits <= sigma.len() {
            let v = sigma.read_bits(pos, bits);
            let hv = HashValue { value: v, bits: bits as u32 };
            match self.entries.get(&hv) {
                Some(e) if e.block.parent() == Some(last.hash()) => {
                    last = &e.block;
                    pos += bits;
                }
                _ => break,
            }
        }
        Resolution { last: last.clone(), reduct_len: pos, matched: true }
    }

    /// `(chain(σ), reduct(σ), last(σ))`.
    pub fn resolve_prefix(&mut self, sigma: &ChainString) -> (Arc<BlockChain>, ChainString, Block) {
        let r = self.resolve(sigma);
        let chain = self.chain_to(r.last.hash()).expect("resolved block is stored");
        let reduct = chain.hashes().clone();
        (chain, reduct, r.last)
    }

    /// The set `E`: children `b` of `last(pref)` with `pref ⊆ reduct(pref) * H(b)`,
    /// in arrival order.
    pub fn children_extending(&self, pref: &ChainString) -> Vec<Block> {
        let r = self.resolve(pref);
        self.children_extending_from(pref, &r)
    }

    pub fn children_extending_from(&self, pref: &ChainString, r: &Resolution) -> Vec<Block> {
        if !r.matched {
            return Vec::new();
        }
        let bits = self.hash_bits() as usize;
        let tail = pref.len() - r.reduct_len;
        if tail >= bits {
            return Vec::new();
        }
        self.children(r.last.hash())
            .filter(|c| (0..tail).all(|i| hash_bit(c.hash(), i) == pref.bit(r.reduct_len + i)))
            .cloned()
            .collect()
    }
}

/// Bit `i` (from the most significant end) of an `L`-bit hash.
pub fn hash_bit(h: HashValue, i: usize) -> bool {
    (h.value >> (h.bits as usize - 1 - i)) & 1 == 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cs(s: &str) -> ChainString {
        ChainString::parse(s).unwrap()
    }

    fn oracle() -> SharedOracle {
        HashOracle::shared(HashBackend::Oracle, 8, 1).unwrap()
    }

    #[test]
    fn extends_examples() {
        assert!(extends(&cs("01"), &cs("011")));
        assert!(!extends(&cs("01"), &cs("0")));
        assert!(extends(&cs("0110"), &cs("0110")));
        assert!(extends(&ChainString::new(), &cs("1")));
    }

    #[test]
    fn truncate_clears_tail_bits() {
        let mut a = cs("1111111111");
        a.truncate(3);
        assert_eq!(a, cs("111"));
        let long = ChainString::from_bits(&[true; 130]);
        assert_eq!(long.prefix(65), ChainString::from_bits(&[true; 65]));
    }

    #[test]
    fn ordering_puts_prefix_first() {
        let mut v = vec![cs("1"), cs("01"), cs("0"), cs(""), cs("011")];
        v.sort();
        assert_eq!(v, vec![cs(""), cs("0"), cs("01"), cs("011"), cs("1")]);
    }

    #[test]
    fn hash_concat_of_chain_and_non_chain() {
        let o = oracle();
        let g = Block::genesis(&o).unwrap();
        let b1 = mint_child(&o, &g, ProcessId(0), 0, vec![]).unwrap();
        let b2 = mint_child(&o, &b1, ProcessId(0), 1, vec![]).unwrap();
        assert_eq!(hash_concat(&[g.clone()], g.hash()), g.hash().to_chain_string());
        let s = hash_concat(&[g.clone(), b1.clone(), b2.clone()], g.hash());
        let mut direct = ChainString::new();
        for b in [&g, &b1, &b2] {
            for i in 0..8 {
                direct.push(hash_bit(b.hash(), i));
            }
        }
        assert_eq!(s.len(), 24);
        assert_eq!(s, direct);
        assert!(hash_concat(&[g.clone(), b2.clone()], g.hash()).is_empty());
        assert!(hash_concat(&[b1.clone()], g.hash()).is_empty());
    }

    #[test]
    fn resolve_examples() {
        let o = oracle();
        let g = Block::genesis(&o).unwrap();
        let b1 = mint_child(&o, &g, ProcessId(0), 0, vec![]).unwrap();
        let bx = mint_child(&o, &g, ProcessId(1), 0, vec![]).unwrap();
        let mut store = BlockStore::new(g.clone());
        store.insert(b1.clone());

        let hg = g.hash().to_chain_string();
        let (chain, reduct, last) = store.resolve_prefix(&hg);
        assert_eq!(chain.blocks(), &[g.clone()]);
        assert_eq!(reduct, hg);
        assert_eq!(last, g);

        let sigma = hg.concat(&b1.hash().to_chain_string()).concat(&cs("01"));
        let (chain, reduct, last) = store.resolve_prefix(&sigma);
        assert_eq!(chain.blocks(), &[g.clone(), b1.clone()]);
        assert_eq!(reduct, hg.concat(&b1.hash().to_chain_string()));
        assert_eq!(last, b1);

        let unknown = hg.concat(&bx.hash().to_chain_string());
        let (chain, reduct, last) = store.resolve_prefix(&unknown);
        assert_eq!(chain.blocks(), &[g.clone()]);
        assert_eq!(reduct, hg);
        assert_eq!(last, g);
    }

    #[test]
    fn children_extending_filters_by_partial_hash() {
        let o = oracle();
        let g = Block::genesis(&o).unwrap();
        let mut store = BlockStore::new(g.clone());
        let hg = g.hash().to_chain_string();
        assert!(store.children_extending(&hg).is_empty());

        let c1 = mint_child(&o, &g, ProcessId(0), 0, vec![]).unwrap();
        let c2 = mint_child(&o, &g, ProcessId(1), 0, vec![]).unwrap();
        store.insert(c1.clone());
        store.insert(c2.clone());
        assert_eq!(store.children_extending(&hg), vec![c1.clone(), c2.clone()]);

        // Only children whose hash starts with the pending bit qualify.
        let first = hash_bit(c1.hash(), 0);
        let pref = hg.with_bit(!first);
        let expect: Vec<Block> = [&c1, &c2]
            .into_iter()
            .filter(|c| hash_bit(c.hash(), 0) == !first)
            .cloned()
            .collect();
        assert_eq!(store.children_extending(&pref), expect);
        assert!(!expect.contains(&c1));
    }

    #[test]
    fn mint_is_deterministic_and_injective() {
        let o1 = oracle();
        let o2 = oracle();
        let g1 = Block::genesis(&o1).unwrap();
        let g2 = Block::genesis(&o2).unwrap();
        let a = mint_child(&o1, &g1, ProcessId(3), 0, vec![b"x".to_vec()]).unwrap();
        let b = mint_child(&o1, &g1, ProcessId(3), 1, vec![b"x".to_vec()]).unwrap();
        assert_eq!(a.parent(), Some(g1.hash()));
        assert_ne!(a.id(), b.id());
        assert_ne!(a.hash(), b.hash());
        let a2 = mint_child(&o2, &g2, ProcessId(3), 0, vec![b"x".to_vec()]).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn truncated_sha_backend_reports_collisions() {
        let o = HashOracle::shared(HashBackend::Sha256Truncated, 4, 0).unwrap();
        let g = Block::genesis(&o).unwrap();
        let mut collided = false;
        for i in 0..40 {
            if let Err(Error::HashCollision { .. }) = mint_child(&o, &g, ProcessId(0), i, vec![]) {
                collided = true;
                break;
            }
        }
        assert!(collided, "16 values cannot hold 40 blocks");
    }

    #[test]
    fn frontier_examples() {
        let v = [cs("0110"), cs("0110"), cs("0111"), cs("00")];
        assert_eq!(threshold_frontier(&v, 3), vec![cs("011")]);
        assert_eq!(threshold_frontier(&v, 2), vec![cs("0110")]);
        assert_eq!(threshold_frontier(&v, 1), vec![cs("00"), cs("0110"), cs("0111")]);
        assert!(threshold_frontier(&v, 5).is_empty());
    }

    /// Greatest-h search by trying every candidate chain of stored blocks.
    fn brute_resolve(store: &BlockStore, all: &[Block], sigma: &ChainString) -> (ChainString, Block) {
        let g = store.genesis().clone();
        let mut best = (g.hash().to_chain_string(), g.clone());
        let chains = enumerate_chains(all, &g);
        for chain in chains {
            let h = hash_concat(&chain, g.hash());
            if sigma.starts_with(&h) && h.len() > best.0.len() {
                best = (h, chain.last().unwrap().clone());
            }
        }
        best
    }

    fn enumerate_chains(all: &[Block], g: &Block) -> Vec<Vec<Block>> {
        let mut out = vec![vec![g.clone()]];
        let mut i = 0;
        while i < out.len() {
            let tip = out[i].last().unwrap().hash();
            for b in all.iter().filter(|b| b.parent() == Some(tip)) {
                let mut c = out[i].clone();
                c.push(b.clone());
                out.push(c);
            }
            i += 1;
        }
        out
    }

    proptest! {
        #[test]
        fn read_bits_matches_bit(v in proptest::collection::vec(any::<bool>(), 0..200), a in 0usize..200, n in 0usize..=64) {
            let s = ChainString::from_bits(&v);
            let a = a % (v.len() + 1);
            let n = n.min(v.len() - a);
            let want = (a..a + n).fold(0u64, |acc, i| (acc << 1) | v[i] as u64);
            prop_assert_eq!(s.read_bits(a, n), want);
        }

        #[test]
        fn frontier_matches_counting(raw in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 0..8), 1..14),
                                     th in 1usize..14) {
            let vals: Vec<ChainString> = raw.iter().map(|b| ChainString::from_bits(b)).collect();
            let front = threshold_frontier(&vals, th);
            let count = |s: &ChainString| vals.iter().filter(|v| v.starts_with(s)).count();
            // Every prefix of every value: supported iff below some frontier element.
            for v in &vals {
                for l in 0..=v.len() {
                    let s = v.prefix(l);
                    prop_assert_eq!(count(&s) >= th, front.iter().any(|f| f.starts_with(&s)));
                }
            }
            for f in &front {
                prop_assert!(count(f) >= th);
            }
            if 2 * th > vals.len() {
                prop_assert!(front.len() <= 1);
            }
        }

        #[test]
        fn lcp_matches_bitwise(a in proptest::collection::vec(any::<bool>(), 0..200),
                               b in proptest::collection::vec(any::<bool>(), 0..200)) {
            let (x, y) = (ChainString::from_bits(&a), ChainString::from_bits(&b));
            let naive = a.iter().zip(&b).take_while(|(p, q)| p == q).count();
            prop_assert_eq!(x.lcp(&y), naive);
            prop_assert_eq!(x.starts_with(&y), b.len() <= a.len() && a[..b.len()] == b[..]);
        }

        #[test]
        fn resolve_matches_brute_force(parents in proptest::collection::vec(0usize..6, 1..=6),
                                       pick in 0usize..64, extra in proptest::collection::vec(any::<bool>(), 0..12),
                                       cut in 0usize..64) {
            let o = HashOracle::shared(HashBackend::Oracle, 6, pick as u64).unwrap();
            let g = Block::genesis(&o).unwrap();
            let mut all: Vec<Block> = Vec::new();
            for (i, p) in parents.iter().enumerate() {
                let parent = if *p == 0 || all.is_empty() { g.clone() } else { all[(*p - 1) % all.len()].clone() };
                all.push(mint_child(&o, &parent, ProcessId(i), i as u64, vec![]).unwrap());
            }
            let mut store = BlockStore::new(g.clone());
            for b in &all {
                store.insert(b.clone());
            }
            // σ: some chain's hashes, cut at an arbitrary point, plus noise.
            let chains = enumerate_chains(&all, &g);
            let base = hash_concat(&chains[pick % chains.len()], g.hash());
            let sigma = base.prefix(base.len().saturating_sub(cut % 8)).concat(&ChainString::from_bits(&extra));
            let (chain, reduct, last) = store.resolve_prefix(&sigma);
            let (oracle_reduct, oracle_last) = brute_resolve(&store, &all, &sigma);
            prop_assert_eq!(&reduct, &oracle_reduct);
            prop_assert_eq!(&last, &oracle_last);
            prop_assert_eq!(chain.hashes(), &reduct);
            if sigma.starts_with(&g.hash().to_chain_string()) {
                prop_assert!(sigma.starts_with(&reduct));
            }
        }
    }
}
