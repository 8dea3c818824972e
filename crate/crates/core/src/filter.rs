//! Standard and counting Bloom filters over canonical element encodings,
//! plus compressed deltas between published snapshots.
//!
//! Position derivation is fixed bit-exactly so that independently built
//! filters agree: one SHA-256 digest of `seed_be8 || key` yields two 64-bit
//! words `h1` (bytes 0..8) and `h2` (bytes 8..16), both big-endian, and the
//! i-th position is `(h1 + i*h2) mod m`, evaluated without 64-bit wraparound.
//! One digest covers all `k` positions regardless of `k`.

use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{self, Reader, WireError};

/// Snapshot file magic.
pub const SNAPSHOT_MAGIC: &str = "PBF1";
/// Delta file magic.
pub const DELTA_MAGIC: &str = "PBD1";
/// Counting-filter file magic (PCA-internal persistence).
pub const COUNTING_MAGIC: &str = "PCB1";

const FORMAT_VERSION: u8 = 1;

/// Default per-bit counter width for the PCA-side counting filter.
pub const DEFAULT_COUNTER_BITS: u8 = 4;

pub const MAX_HASHES: u8 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("invalid filter parameters: {0}")]
    InvalidParams(&'static str),
    #[error("element key must be non-empty")]
    EmptyKey,
    #[error("filter parameters mismatch")]
    ParamsMismatch,
    #[error("version mismatch: filter at {have}, delta covers {from} -> {to}")]
    VersionMismatch { have: u64, from: u64, to: u64 },
    #[error("snapshot versions not increasing: {old} >= {new}")]
    VersionOrder { old: u64, new: u64 },
    #[error("counter underflow: delete of a key with a zero counter")]
    CounterUnderflow,
    #[error("corrupt payload: {0}")]
    CorruptPayload(#[from] WireError),
}

/// Sizing and hash-domain parameters shared by a filter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    /// Bit length of the filter vector (`m`). Always a multiple of 8.
    pub bits: u64,
    /// Number of hash positions per element (`k`).
    pub hashes: u8,
    /// Expected element count the filter was sized for.
    pub expected_elements: u64,
    /// 64-bit hash-domain separator mixed into every digest.
    pub seed: u64,
}

impl FilterParams {
    /// Validates and normalizes parameters; `bits` is rounded up to the next
    /// multiple of 8.
    pub fn new(bits: u64, hashes: u8, expected_elements: u64, seed: u64) -> Result<Self, FilterError> {
        let bits = bits
            .checked_add(7)
            .ok_or(FilterError::InvalidParams("bit count overflows"))?
            / 8
            * 8;
        let p = FilterParams { bits, hashes, expected_elements, seed };
        p.validate()?;
        Ok(p)
    }

    /// Sizes a filter at `bits_per_element * expected_elements` bits with the
    /// false-positive-optimal hash count for that ratio.
    pub fn with_bits_per_element(
        expected_elements: u64,
        bits_per_element: f64,
        seed: u64,
    ) -> Result<Self, FilterError> {
        if !(bits_per_element.is_finite() && bits_per_element > 0.0) {
            return Err(FilterError::InvalidParams("bits per element must be positive"));
        }
        let bits = (expected_elements as f64 * bits_per_element).ceil() as u64;
        Self::new(bits, optimal_hash_count(bits_per_element), expected_elements, seed)
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.bits < 8 || !self.bits.is_multiple_of(8) {
            return Err(FilterError::InvalidParams("bit count must be a multiple of 8, at least 8"));
        }
        if self.hashes == 0 || self.hashes > MAX_HASHES {
            return Err(FilterError::InvalidParams("hash count must be in 1..=64"));
        }
        if self.expected_elements == 0 {
            return Err(FilterError::InvalidParams("expected element count must be at least 1"));
        }
        Ok(())
    }

    fn byte_len(&self) -> usize {
        (self.bits / 8) as usize
    }
}

/// `k* = round((m/n) ln 2)`, clamped to the supported range.
pub fn optimal_hash_count(bits_per_element: f64) -> u8 {
    let k = (bits_per_element * std::f64::consts::LN_2).round();
    k.clamp(1.0, MAX_HASHES as f64) as u8
}

/// Canonical byte string identifying one filter element.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementKey(Vec<u8>);

impl ElementKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, FilterError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(FilterError::EmptyKey);
        }
        Ok(ElementKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Exact 32-byte digest used by fake-pseudonym lists.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(&self.0).into()
    }
}

impl fmt::Debug for ElementKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ElementKey(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Iterator over the `k` bit positions of a key, in derivation order.
/// Positions may repeat; counting-filter updates dedupe them.
#[derive(Clone)]
pub struct Positions {
    base: u64,
    step: u64,
    bits: u64,
    count: u8,
    next: u8,
}

impl Iterator for Positions {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.next >= self.count {
            return None;
        }
        let i = self.next as u128;
        self.next += 1;
        // Exact in u128: base, step < 2^64 and i < 64.
        Some(((self.base as u128 + i * self.step as u128) % self.bits as u128) as u64)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Positions {}

/// Derives the `k` bit positions for `key` under `params`.
pub fn hash_positions(key: &ElementKey, params: &FilterParams) -> Positions {
    let mut hasher = Sha256::new();
    hasher.update(params.seed.to_be_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    Positions {
        base: u64::from_be_bytes(digest[0..8].try_into().unwrap()),
        step: u64::from_be_bytes(digest[8..16].try_into().unwrap()),
        bits: params.bits,
        count: params.hashes,
        next: 0,
    }
}

/// Positions of `key` with duplicates removed, sorted ascending.
fn distinct_positions(key: &ElementKey, params: &FilterParams) -> Vec<u64> {
    let mut v: Vec<u64> = hash_positions(key, params).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Covered validity window of a published snapshot, in seconds since epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub start: u64,
    pub duration: u64,
}

impl Coverage {
    pub fn new(start: u64, duration: u64) -> Self {
        Coverage { start, duration }
    }

    pub fn end(&self) -> u64 {
        self.start.saturating_add(self.duration)
    }

    pub fn contains_window(&self, not_before: u64, not_after: u64) -> bool {
        not_before >= self.start && not_after <= self.end()
    }
}

/// Published membership structure: an immutable bit vector plus the hash
/// parameters needed to query it.
#[derive(Clone, PartialEq, Eq)]
pub struct BloomFilter {
    seed: u64,
    hashes: u8,
    bit_count: u64,
    bytes: Box<[u8]>,
    version: u64,
    coverage: Coverage,
}

impl fmt::Debug for BloomFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BloomFilter")
            .field("bits", &self.bit_count)
            .field("hashes", &self.hashes)
            .field("seed", &self.seed)
            .field("version", &self.version)
            .field("set_bits", &self.set_bits())
            .finish()
    }
}

impl BloomFilter {
    pub fn empty(params: &FilterParams, version: u64, coverage: Coverage) -> Result<Self, FilterError> {
        params.validate()?;
        Ok(BloomFilter {
            seed: params.seed,
            hashes: params.hashes,
            bit_count: params.bits,
            bytes: vec![0u8; params.byte_len()].into_boxed_slice(),
            version,
            coverage,
        })
    }

    /// Builds a filter over a fixed key set. The result is immutable.
    pub fn from_keys<'a>(
        params: &FilterParams,
        version: u64,
        coverage: Coverage,
        keys: impl IntoIterator<Item = &'a ElementKey>,
    ) -> Result<Self, FilterError> {
        let mut bf = Self::empty(params, version, coverage)?;
        for key in keys {
            for pos in hash_positions(key, params) {
                bf.set_bit(pos);
            }
        }
        Ok(bf)
    }

    fn set_bit(&mut self, i: u64) {
        self.bytes[(i / 8) as usize] |= 1 << (7 - (i % 8));
    }

    pub fn bit(&self, i: u64) -> bool {
        self.bytes[(i / 8) as usize] & (1 << (7 - (i % 8))) != 0
    }

    /// Membership test: true iff all `k` positions are set.
    pub fn query(&self, key: &ElementKey) -> bool {
        hash_positions(key, &self.wire_params()).all(|i| self.bit(i))
    }

    pub fn bit_count(&self) -> u64 {
        self.bit_count
    }

    pub fn set_bits(&self) -> u64 {
        self.bytes.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Fraction of bits set; the `p` of the analytic models.
    pub fn fill_fraction(&self) -> f64 {
        self.set_bits() as f64 / self.bit_count as f64
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn coverage(&self) -> Coverage {
        self.coverage
    }

    pub fn hashes(&self) -> u8 {
        self.hashes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hash parameters of this snapshot. `expected_elements` is not carried
    /// on the wire and is reported as the sizing-neutral value 1.
    pub fn wire_params(&self) -> FilterParams {
        FilterParams {
            bits: self.bit_count,
            hashes: self.hashes,
            expected_elements: 1,
            seed: self.seed,
        }
    }

    fn same_family(&self, other: &BloomFilter) -> bool {
        self.seed == other.seed && self.hashes == other.hashes && self.bit_count == other.bit_count
    }

    /// Serializes to the published snapshot format.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes.len() + 64);
        out.extend_from_slice(SNAPSHOT_MAGIC.as_bytes());
        out.push(FORMAT_VERSION);
        wire::put_u64(&mut out, self.seed);
        wire::put_u64(&mut out, self.bit_count);
        out.push(self.hashes);
        wire::put_u64(&mut out, self.version);
        wire::put_u64(&mut out, self.coverage.start);
        wire::put_u64(&mut out, self.coverage.duration);
        out.extend_from_slice(&self.bytes);
        wire::put_crc(&mut out);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FilterError> {
        let mut r = Reader::new(buf);
        r.magic(SNAPSHOT_MAGIC)?;
        let fmt = r.u8()?;
        if fmt != FORMAT_VERSION {
            return Err(WireError::UnsupportedVersion(fmt).into());
        }
        let seed = r.u64()?;
        let bit_count = r.u64()?;
        let hashes = r.u8()?;
        let version = r.u64()?;
        let coverage = Coverage::new(r.u64()?, r.u64()?);
        if bit_count < 8 || !bit_count.is_multiple_of(8) || bit_count / 8 > usize::MAX as u64 {
            return Err(WireError::Invalid("bit count").into());
        }
        if hashes == 0 || hashes > MAX_HASHES {
            return Err(WireError::Invalid("hash count").into());
        }
        let bytes = r.bytes((bit_count / 8) as usize)?.to_vec();
        r.finish_crc()?;
        Ok(BloomFilter {
            seed,
            hashes,
            bit_count,
            bytes: bytes.into_boxed_slice(),
            version,
            coverage,
        })
    }

    /// Computes the compressed difference from `self` to `newer`.
    pub fn delta_to(&self, newer: &BloomFilter) -> Result<BfDelta, FilterError> {
        if !self.same_family(newer) {
            return Err(FilterError::ParamsMismatch);
        }
        if self.version >= newer.version {
            return Err(FilterError::VersionOrder { old: self.version, new: newer.version });
        }
        let mut flipped = Vec::new();
        for (byte_idx, (a, b)) in self.bytes.iter().zip(newer.bytes.iter()).enumerate() {
            let mut diff = a ^ b;
            while diff != 0 {
                let lead = diff.leading_zeros() as u64;
                flipped.push(byte_idx as u64 * 8 + lead);
                diff &= !(1 << (7 - lead));
            }
        }
        Ok(BfDelta {
            from_version: self.version,
            to_version: newer.version,
            flipped,
        })
    }

    /// Applies a delta, producing the newer snapshot. The coverage window is
    /// carried over; full snapshots refresh it.
    pub fn apply_delta(&self, delta: &BfDelta) -> Result<BloomFilter, FilterError> {
        if delta.from_version != self.version {
            return Err(FilterError::VersionMismatch {
                have: self.version,
                from: delta.from_version,
                to: delta.to_version,
            });
        }
        let mut next = self.clone();
        next.version = delta.to_version;
        for &pos in &delta.flipped {
            if pos >= self.bit_count {
                return Err(WireError::Invalid("flip position out of range").into());
            }
            next.bytes[(pos / 8) as usize] ^= 1 << (7 - (pos % 8));
        }
        Ok(next)
    }
}

/// Versioned XOR difference between two snapshots of the same family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BfDelta {
    pub from_version: u64,
    pub to_version: u64,
    flipped: Vec<u64>,
}

impl BfDelta {
    /// Builds a delta from a strictly increasing position list.
    pub fn new(from_version: u64, to_version: u64, flipped: Vec<u64>) -> Result<Self, FilterError> {
        if !flipped.windows(2).all(|w| w[0] < w[1]) {
            return Err(WireError::Invalid("positions not strictly increasing").into());
        }
        Ok(BfDelta { from_version, to_version, flipped })
    }

    pub fn empty(version: u64) -> Self {
        BfDelta { from_version: version, to_version: version, flipped: Vec::new() }
    }

    pub fn flipped_positions(&self) -> &[u64] {
        &self.flipped
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }

    pub fn flip_count(&self) -> u64 {
        self.flipped.len() as u64
    }

    /// Serializes as gap-encoded varints: first gap is taken from position
    /// -1, so every gap is at least 1.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.flipped.len() * 2 + 40);
        out.extend_from_slice(DELTA_MAGIC.as_bytes());
        out.push(FORMAT_VERSION);
        wire::put_u64(&mut out, self.from_version);
        wire::put_u64(&mut out, self.to_version);
        wire::put_u64(&mut out, self.flipped.len() as u64);
        let mut prev: i128 = -1;
        for &pos in &self.flipped {
            wire::put_varint(&mut out, (pos as i128 - prev) as u64);
            prev = pos as i128;
        }
        wire::put_crc(&mut out);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FilterError> {
        let mut r = Reader::new(buf);
        r.magic(DELTA_MAGIC)?;
        let fmt = r.u8()?;
        if fmt != FORMAT_VERSION {
            return Err(WireError::UnsupportedVersion(fmt).into());
        }
        let from_version = r.u64()?;
        let to_version = r.u64()?;
        let count = r.u64()?;
        if count > buf.len() as u64 {
            // Each encoded gap is at least one byte.
            return Err(WireError::Invalid("flip count exceeds payload").into());
        }
        let mut flipped = Vec::with_capacity(count as usize);
        let mut prev: i128 = -1;
        for _ in 0..count {
            let gap = r.varint()?;
            if gap == 0 {
                return Err(WireError::Invalid("zero gap").into());
            }
            let pos = prev + gap as i128;
            if pos > u64::MAX as i128 {
                return Err(WireError::Invalid("position overflows").into());
            }
            flipped.push(pos as u64);
            prev = pos;
        }
        r.finish_crc()?;
        Ok(BfDelta { from_version, to_version, flipped })
    }
}

/// PCA-side mutable registry filter: one saturating counter per bit.
///
/// Single-writer. Readers work on immutable projected snapshots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingBloomFilter {
    params: FilterParams,
    counters: Box<[u8]>,
    counter_bits: u8,
    overflow_count: u64,
}

impl CountingBloomFilter {
    pub fn new(params: FilterParams) -> Result<Self, FilterError> {
        Self::with_counter_bits(params, DEFAULT_COUNTER_BITS)
    }

    pub fn with_counter_bits(params: FilterParams, counter_bits: u8) -> Result<Self, FilterError> {
        params.validate()?;
        if counter_bits == 0 || counter_bits > 8 {
            return Err(FilterError::InvalidParams("counter width must be in 1..=8 bits"));
        }
        Ok(CountingBloomFilter {
            counters: vec![0u8; params.bits as usize].into_boxed_slice(),
            params,
            counter_bits,
            overflow_count: 0,
        })
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn counter_bits(&self) -> u8 {
        self.counter_bits
    }

    fn counter_max(&self) -> u8 {
        ((1u16 << self.counter_bits) - 1) as u8
    }

    pub fn counter(&self, i: u64) -> u8 {
        self.counters[i as usize]
    }

    /// Number of saturating-increment events since creation.
    pub fn overflow_count(&self) -> u64 {
        self.overflow_count
    }

    /// Increments the counter at each distinct position of `key`.
    /// Saturated counters stay at the maximum and are recorded.
    pub fn insert(&mut self, key: &ElementKey) {
        let max = self.counter_max();
        for pos in distinct_positions(key, &self.params) {
            let c = &mut self.counters[pos as usize];
            if *c == max {
                self.overflow_count += 1;
            } else {
                *c += 1;
            }
        }
    }

    /// Decrements the counter at each distinct position of `key`.
    ///
    /// Saturated counters are never decremented: once a counter has
    /// overflowed its true value is unknown, and decrementing could clear a
    /// bit another element still needs. The bit stays permanently stale
    /// instead, which preserves the no-false-negative guarantee.
    ///
    /// A zero counter means the key was never inserted (or was already
    /// deleted); the remaining counters are still decremented and
    /// `CounterUnderflow` is reported.
    pub fn delete(&mut self, key: &ElementKey) -> Result<(), FilterError> {
        let max = self.counter_max();
        let mut underflow = false;
        for pos in distinct_positions(key, &self.params) {
            let c = &mut self.counters[pos as usize];
            if *c == 0 {
                underflow = true;
            } else if *c != max {
                *c -= 1;
            }
        }
        if underflow {
            Err(FilterError::CounterUnderflow)
        } else {
            Ok(())
        }
    }

    /// Membership test against the live counters.
    pub fn query(&self, key: &ElementKey) -> bool {
        hash_positions(key, &self.params).all(|i| self.counters[i as usize] > 0)
    }

    /// Projects the counters to the publishable bit vector: bit i is set iff
    /// counter i is positive.
    pub fn project(&self, version: u64, coverage: Coverage) -> BloomFilter {
        let mut bf = BloomFilter::empty(&self.params, version, coverage)
            .expect("counting filter params are validated on construction");
        for (i, &c) in self.counters.iter().enumerate() {
            if c > 0 {
                bf.set_bit(i as u64);
            }
        }
        bf
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.counters.len() + 64);
        out.extend_from_slice(COUNTING_MAGIC.as_bytes());
        out.push(FORMAT_VERSION);
        wire::put_u64(&mut out, self.params.seed);
        wire::put_u64(&mut out, self.params.bits);
        out.push(self.params.hashes);
        wire::put_u64(&mut out, self.params.expected_elements);
        out.push(self.counter_bits);
        wire::put_u64(&mut out, self.overflow_count);
        out.extend_from_slice(&self.counters);
        wire::put_crc(&mut out);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FilterError> {
        let mut r = Reader::new(buf);
        r.magic(COUNTING_MAGIC)?;
        let fmt = r.u8()?;
        if fmt != FORMAT_VERSION {
            return Err(WireError::UnsupportedVersion(fmt).into());
        }
        let seed = r.u64()?;
        let bits = r.u64()?;
        let hashes = r.u8()?;
        let expected_elements = r.u64()?;
        let counter_bits = r.u8()?;
        let overflow_count = r.u64()?;
        let params = FilterParams { bits, hashes, expected_elements, seed };
        params.validate().map_err(|_| WireError::Invalid("filter params"))?;
        if counter_bits == 0 || counter_bits > 8 {
            return Err(WireError::Invalid("counter width").into());
        }
        let counters = r.bytes(bits as usize)?.to_vec();
        r.finish_crc()?;
        let max = ((1u16 << counter_bits) - 1) as u8;
        if counters.iter().any(|&c| c > max) {
            return Err(WireError::Invalid("counter exceeds width").into());
        }
        Ok(CountingBloomFilter {
            params,
            counters: counters.into_boxed_slice(),
            counter_bits,
            overflow_count,
        })
    }
}

/// Exact membership list of key digests: the paper's hash-list alternative.
///
/// Kept as a benchmark and test oracle; it has no false positives, so any
/// divergence from a Bloom filter on an inserted key is a filter bug.
#[derive(Debug, Clone, Default)]
pub struct HashList {
    digests: BTreeSet<[u8; 32]>,
}

impl HashList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &ElementKey) {
        self.digests.insert(key.digest());
    }

    pub fn remove(&mut self, key: &ElementKey) -> bool {
        self.digests.remove(&key.digest())
    }

    pub fn contains(&self, key: &ElementKey) -> bool {
        self.digests.contains(&key.digest())
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }
}
