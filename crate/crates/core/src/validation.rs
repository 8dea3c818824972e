//! Receiver-side pseudonym validation: filter test, FPL check,
//! probabilistic cross-verification, signature fallback with an
//! anti-clogging token bucket, and the reactive-update trigger.
//!
//! A validator instance is single-threaded; the snapshot and FPL it holds
//! are immutable values, so independent validators can run concurrently
//! without coordination.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::credentials::{FakePseudonymList, IssuerVerifier, LifetimeMode, Pseudonym};
use crate::filter::{BfDelta, BloomFilter, ElementKey, FilterError};

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("invalid validator config: {0}")]
    InvalidConfig(&'static str),
    #[error("update version mismatch: holding {have}, update covers {from} -> {to}")]
    VersionMismatch { have: u64, from: u64, to: u64 },
    #[error("stale snapshot: holding {have}, offered {offered}")]
    StaleSnapshot { have: u64, offered: u64 },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("bad trace row {line}: {reason}")]
    BadTraceRow { line: usize, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidatorConfig {
    /// Probability of verifying the PCA signature even after a successful
    /// filter test.
    pub cross_verify_probability: f64,
    /// Fallback token refill rate: how many baseline signature
    /// verifications per second non-filter pseudonyms may consume.
    pub fallback_rate: f64,
    /// Fallback bucket depth.
    pub fallback_burst: f64,
    /// Seed of the cross-verification sampler.
    pub rng_seed: u64,
    /// Unknown-pseudonym arrivals within the window that trigger a
    /// reactive update.
    pub reactive_threshold: u32,
    /// Sliding-window length for the reactive trigger, seconds.
    pub reactive_window_s: f64,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        ValidatorConfig {
            cross_verify_probability: 0.01,
            fallback_rate: 20.0,
            fallback_burst: 40.0,
            rng_seed: 0,
            reactive_threshold: 10,
            reactive_window_s: 10.0,
        }
    }
}

impl ValidatorConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(0.0..=1.0).contains(&self.cross_verify_probability) {
            return Err(ValidationError::InvalidConfig("cross-verify probability not in [0, 1]"));
        }
        if !(self.fallback_rate.is_finite() && self.fallback_rate >= 0.0) {
            return Err(ValidationError::InvalidConfig("fallback rate must be non-negative"));
        }
        if !(self.fallback_burst.is_finite() && self.fallback_burst >= 0.0) {
            return Err(ValidationError::InvalidConfig("fallback burst must be non-negative"));
        }
        Ok(())
    }
}

/// Terminal outcome of validating one pseudonym.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// Passed the filter test and the FPL check.
    AcceptedViaFilter,
    /// Missed the filter but carried a valid PCA signature (baseline path).
    AcceptedViaSignature,
    /// Not currently within its validity window.
    RejectedLifetime,
    /// Passed the filter but is a known fake.
    RejectedFplHit,
    /// Missed the filter and its PCA signature does not verify.
    RejectedBadSignature,
    /// Missed the filter and the fallback budget was exhausted.
    RejectedBudgetExhausted,
    /// Passed the filter but failed cross-verification; reported and added
    /// to the local FPL.
    DetectedFakeReported,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::AcceptedViaFilter => "accepted_via_filter",
            Outcome::AcceptedViaSignature => "accepted_via_signature",
            Outcome::RejectedLifetime => "rejected_lifetime",
            Outcome::RejectedFplHit => "rejected_fpl_hit",
            Outcome::RejectedBadSignature => "rejected_bad_signature",
            Outcome::RejectedBudgetExhausted => "rejected_budget_exhausted",
            Outcome::DetectedFakeReported => "detected_fake_reported",
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Outcome::AcceptedViaFilter | Outcome::AcceptedViaSignature)
    }
}

/// Outcome plus the work it cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationRecord {
    pub outcome: Outcome,
    pub hash_ops: u32,
    pub signature_verifications: u32,
}

/// Deterministic token bucket driven by caller-supplied timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: f64,
}

impl TokenBucket {
    /// Starts full at time zero.
    pub fn new(rate: f64, burst: f64) -> Self {
        TokenBucket { rate, burst, tokens: burst, last: 0.0 }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Lowers the refill rate; the adaptive hook for clogging conditions.
    pub fn set_rate(&mut self, rate: f64) {
        self.rate = rate.max(0.0);
    }

    /// Takes one token if available at time `now`. Time must not run
    /// backwards; out-of-order calls refill nothing.
    pub fn try_take(&mut self, now: f64) -> bool {
        if now > self.last {
            self.tokens = (self.tokens + (now - self.last) * self.rate).min(self.burst);
            self.last = now;
        }
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

/// A filter update as fetched from the PCA.
#[derive(Debug, Clone)]
pub enum FilterUpdate {
    Delta(BfDelta),
    Snapshot(BloomFilter),
}

/// Per-vehicle validation state: the local snapshot and FPL copies, the
/// fallback budget, and the reactive-update trigger.
pub struct VehicleValidator {
    snapshot: BloomFilter,
    fpl: FakePseudonymList,
    config: ValidatorConfig,
    mode: LifetimeMode,
    issuer: IssuerVerifier,
    bucket: TokenBucket,
    sampler: ChaCha12Rng,
    unknown_arrivals: VecDeque<f64>,
    pending_update: bool,
    pending_reports: Vec<ElementKey>,
}

impl VehicleValidator {
    pub fn new(
        snapshot: BloomFilter,
        fpl: FakePseudonymList,
        config: ValidatorConfig,
        mode: LifetimeMode,
        issuer: IssuerVerifier,
    ) -> Result<Self, ValidationError> {
        config.validate()?;
        Ok(VehicleValidator {
            bucket: TokenBucket::new(config.fallback_rate, config.fallback_burst),
            sampler: ChaCha12Rng::seed_from_u64(config.rng_seed),
            snapshot,
            fpl,
            config,
            mode,
            issuer,
            unknown_arrivals: VecDeque::new(),
            pending_update: false,
            pending_reports: Vec::new(),
        })
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot.version()
    }

    pub fn fpl_version(&self) -> u64 {
        self.fpl.version()
    }

    pub fn mode(&self) -> LifetimeMode {
        self.mode
    }

    pub fn fallback_bucket_mut(&mut self) -> &mut TokenBucket {
        &mut self.bucket
    }

    /// Validates a received pseudonym at time `now` (seconds).
    pub fn validate(&mut self, pseudonym: &Pseudonym, now: f64) -> ValidationRecord {
        let key = pseudonym.element_key(self.mode);
        let in_lifetime = pseudonym.lifetime.contains(now);
        let issuer = self.issuer.clone();
        self.validate_prechecked(now, &key, in_lifetime, || issuer.verify_pseudonym(pseudonym))
    }

    /// Pipeline entry for trace replay and simulation, where the element
    /// key, lifetime validity and signature validity are supplied directly.
    pub fn validate_prechecked(
        &mut self,
        now: f64,
        key: &ElementKey,
        in_lifetime: bool,
        signature_valid: impl FnOnce() -> bool,
    ) -> ValidationRecord {
        // Cheapest check first; the filter test costs k hash operations and
        // is only reached for live pseudonyms.
        if !in_lifetime {
            return ValidationRecord {
                outcome: Outcome::RejectedLifetime,
                hash_ops: 0,
                signature_verifications: 0,
            };
        }
        let hash_ops = self.snapshot.hashes() as u32;
        if self.snapshot.query(key) {
            if self.fpl.contains(key) {
                return ValidationRecord {
                    outcome: Outcome::RejectedFplHit,
                    hash_ops,
                    signature_verifications: 0,
                };
            }
            let cross_verify = self.config.cross_verify_probability > 0.0
                && self.sampler.random::<f64>() < self.config.cross_verify_probability;
            if cross_verify {
                if signature_valid() {
                    ValidationRecord {
                        outcome: Outcome::AcceptedViaFilter,
                        hash_ops,
                        signature_verifications: 1,
                    }
                } else {
                    self.fpl.add_local(key);
                    self.pending_reports.push(key.clone());
                    ValidationRecord {
                        outcome: Outcome::DetectedFakeReported,
                        hash_ops,
                        signature_verifications: 1,
                    }
                }
            } else {
                ValidationRecord {
                    outcome: Outcome::AcceptedViaFilter,
                    hash_ops,
                    signature_verifications: 0,
                }
            }
        } else {
            self.note_unknown_arrival(now);
            if self.bucket.try_take(now) {
                let outcome = if signature_valid() {
                    Outcome::AcceptedViaSignature
                } else {
                    Outcome::RejectedBadSignature
                };
                ValidationRecord { outcome, hash_ops, signature_verifications: 1 }
            } else {
                ValidationRecord {
                    outcome: Outcome::RejectedBudgetExhausted,
                    hash_ops,
                    signature_verifications: 0,
                }
            }
        }
    }

    fn note_unknown_arrival(&mut self, now: f64) {
        self.unknown_arrivals.push_back(now);
        let horizon = now - self.config.reactive_window_s;
        while self.unknown_arrivals.front().is_some_and(|&t| t < horizon) {
            self.unknown_arrivals.pop_front();
        }
        if self.unknown_arrivals.len() >= self.config.reactive_threshold as usize {
            self.pending_update = true;
        }
    }

    /// True once the unknown-arrival counter reached the threshold within
    /// its sliding window; cleared by the next applied update.
    pub fn needs_reactive_update(&self) -> bool {
        self.pending_update
    }

    pub fn unknown_arrivals_in_window(&self) -> usize {
        self.unknown_arrivals.len()
    }

    /// Applies a delta or full snapshot and resets the reactive trigger.
    /// A delta that does not extend the held version fails with
    /// `VersionMismatch`, signalling the caller to fetch a full snapshot.
    pub fn apply_update(&mut self, update: FilterUpdate) -> Result<(), ValidationError> {
        match update {
            FilterUpdate::Delta(delta) => {
                let next = self.snapshot.apply_delta(&delta).map_err(|e| match e {
                    FilterError::VersionMismatch { have, from, to } => {
                        ValidationError::VersionMismatch { have, from, to }
                    }
                    other => other.into(),
                })?;
                self.snapshot = next;
            }
            FilterUpdate::Snapshot(snapshot) => {
                if snapshot.version() < self.snapshot.version() {
                    return Err(ValidationError::StaleSnapshot {
                        have: self.snapshot.version(),
                        offered: snapshot.version(),
                    });
                }
                self.snapshot = snapshot;
            }
        }
        self.unknown_arrivals.clear();
        self.pending_update = false;
        Ok(())
    }

    /// Replaces the FPL copy if the offered list is newer.
    pub fn apply_fpl(&mut self, fpl: FakePseudonymList) -> bool {
        if fpl.version() > self.fpl.version() {
            self.fpl = fpl;
            true
        } else {
            false
        }
    }

    /// Drains keys detected as fake since the last call, for forwarding to
    /// the PCA.
    pub fn take_pending_reports(&mut self) -> Vec<ElementKey> {
        std::mem::take(&mut self.pending_reports)
    }
}

/// One row of the replay trace format: arrival time, element key, and the
/// two precomputed validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub arrival_s: f64,
    pub key: ElementKey,
    pub signature_valid: bool,
    pub in_lifetime: bool,
}

/// Parses the trace CSV: `arrival_time_s,element_key_hex,has_valid_signature,in_lifetime`.
/// A header line is recognized and skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, ValidationError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("arrival_time_s")) {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |reason| {
            fields
                .next()
                .map(str::trim)
                .ok_or(ValidationError::BadTraceRow { line: idx + 1, reason })
        };
        let arrival_s: f64 = next("missing arrival time")?.parse().map_err(|_| {
            ValidationError::BadTraceRow { line: idx + 1, reason: "bad arrival time" }
        })?;
        let key_hex = next("missing element key")?;
        let key_bytes = decode_hex(key_hex)
            .ok_or(ValidationError::BadTraceRow { line: idx + 1, reason: "bad key hex" })?;
        let key = ElementKey::new(key_bytes)
            .map_err(|_| ValidationError::BadTraceRow { line: idx + 1, reason: "empty key" })?;
        let signature_valid = parse_flag(next("missing signature flag")?)
            .ok_or(ValidationError::BadTraceRow { line: idx + 1, reason: "bad signature flag" })?;
        let in_lifetime = parse_flag(next("missing lifetime flag")?)
            .ok_or(ValidationError::BadTraceRow { line: idx + 1, reason: "bad lifetime flag" })?;
        rows.push(TraceRow { arrival_s, key, signature_valid, in_lifetime });
    }
    Ok(rows)
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}

/// Replays a trace through a validator, producing one record per row.
pub fn replay_trace(
    validator: &mut VehicleValidator,
    rows: &[TraceRow],
) -> Vec<(f64, ValidationRecord)> {
    rows.iter()
        .map(|row| {
            let record = validator.validate_prechecked(
                row.arrival_s,
                &row.key,
                row.in_lifetime,
                || row.signature_valid,
            );
            (row.arrival_s, record)
        })
        .collect()
}
