//! Discrete-event simulation of a vehicle's message-verification queue
//! under neighborhood churn, plus attacker and privacy experiments. The
//! empirical counterpart of the analytic models in [`crate::analytics`].
//!
//! One run is single-threaded and fully deterministic for a fixed config:
//! identical configs produce bit-identical reports. Independent runs may
//! execute in parallel.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::analytics::Scheme;
use crate::credentials::{
    Lifetime, LifetimeMode, MockScheme, PcaRegistry, RegistryConfig, SignatureScheme,
};
use crate::filter::{BloomFilter, Coverage, ElementKey, FilterParams};
use crate::service::{PublicationConfig, PublicationState};
use crate::validation::{FilterUpdate, Outcome, ValidatorConfig, VehicleValidator};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("experiment requires {0}")]
    MissingConfig(&'static str),
    #[error(transparent)]
    Analytics(#[from] crate::analytics::AnalyticsError),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Credential(#[from] crate::credentials::CredentialError),
    #[error(transparent)]
    Validation(#[from] crate::validation::ValidationError),
    #[error(transparent)]
    Service(#[from] crate::service::ServiceError),
}

/// Attacker model overlaid on the verification queue.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackConfig {
    /// Fake-signature pseudonyms injected at a fixed rate (messages per
    /// second).
    Clogging { rate: f64 },
    /// Random key pairs tested against the published filter until one
    /// passes; `max_trials` is the attacker's per-run hash budget and
    /// `lifetime_slots` > 1 lets one key pair be retried across
    /// non-overlapping lifetime slots.
    BruteForce { runs: u32, max_trials: u64, lifetime_slots: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyConfig {
    pub newcomer_vehicles: u32,
    pub pseudonyms_per_vehicle: u32,
    /// Batching threshold of the publication under test.
    pub min_batch_vehicles: u64,
    /// Vehicles already covered by the initial snapshot.
    pub initial_vehicles: u32,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            newcomer_vehicles: 3,
            pseudonyms_per_vehicle: 4,
            min_batch_vehicles: 1000,
            initial_vehicles: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Vehicles within communication range (N).
    pub neighbors: u32,
    /// Neighborhood refresh ratio per second (c): rate of new pseudonyms
    /// per vehicle.
    pub refresh_ratio: f64,
    /// Beacons per vehicle per second (gamma).
    pub beacon_rate: f64,
    /// One signature verification, seconds (tau).
    pub sig_verify_s: f64,
    /// One filter membership test (all k hashes), seconds. Not zero: the
    /// cost model stays honest even though this is three orders of
    /// magnitude below tau.
    pub hash_test_s: f64,
    pub scheme: Scheme,
    pub duration_s: f64,
    /// Leading fraction of the run excluded from time statistics.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub validator: ValidatorConfig,
    /// Desk-scale filter behind the attack experiments.
    pub filter_elements: u64,
    pub filter_bits_per_element: f64,
    pub filter_hashes: Option<u8>,
    /// When set, a reactive snapshot refresh is scheduled once the
    /// unknown-arrival threshold trips, and the fallback rate is halved:
    /// the adaptive response to clogging.
    pub adaptive_fallback: bool,
    /// Delay between the reactive trigger and the applied refresh.
    pub reactive_fetch_delay_s: f64,
    pub attack: Option<AttackConfig>,
    pub privacy: PrivacyConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            neighbors: 50,
            refresh_ratio: 0.6,
            beacon_rate: 3.0,
            sig_verify_s: 0.004,
            hash_test_s: 2e-6,
            scheme: Scheme::BfBased,
            duration_s: 100.0,
            warmup_fraction: 0.1,
            seed: 1,
            validator: ValidatorConfig::default(),
            filter_elements: 10_000,
            filter_bits_per_element: 16.0,
            filter_hashes: None,
            adaptive_fallback: false,
            reactive_fetch_delay_s: 1.0,
            attack: None,
            privacy: PrivacyConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_owned()));
        if self.neighbors == 0 {
            return bad("neighbors must be at least 1");
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return bad("duration must be non-negative");
        }
        if !(self.beacon_rate.is_finite() && self.beacon_rate > 0.0) {
            return bad("beacon rate must be positive");
        }
        if !(self.refresh_ratio.is_finite() && self.refresh_ratio >= 0.0) || self.refresh_ratio > self.beacon_rate {
            return bad("refresh ratio must be in [0, beacon rate]");
        }
        if !(self.sig_verify_s.is_finite() && self.sig_verify_s > 0.0) || !(self.hash_test_s.is_finite() && self.hash_test_s >= 0.0) {
            return bad("service times must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup fraction must be in [0, 1)");
        }
        if let Some(AttackConfig::Clogging { rate }) = &self.attack {
            if !(rate.is_finite() && *rate >= 0.0) {
                return bad("attack rate must be non-negative");
            }
        }
        self.validator.validate()?;
        Ok(())
    }

    /// Parses the flat `key=value` config format (one pair per line, `#`
    /// comments). Unknown keys are rejected.
    pub fn from_kv_text(text: &str) -> Result<SimConfig, SimError> {
        let mut cfg = SimConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SimError::InvalidConfig(format!("line {}: expected key=value", idx + 1))
            })?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), SimError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, SimError> {
            value
                .parse()
                .map_err(|_| SimError::InvalidConfig(format!("bad value for {key}: {value}")))
        }
        match key {
            "neighbors" => self.neighbors = num(key, value)?,
            "refresh_ratio" => self.refresh_ratio = num(key, value)?,
            "beacon_rate" => self.beacon_rate = num(key, value)?,
            "sig_verify_s" => self.sig_verify_s = num(key, value)?,
            "hash_test_s" => self.hash_test_s = num(key, value)?,
            "scheme" => {
                self.scheme = match value {
                    "baseline" => Scheme::Baseline,
                    "bf" => Scheme::BfBased,
                    other => {
                        return Err(SimError::InvalidConfig(format!("unknown scheme: {other}")))
                    }
                }
            }
            "duration_s" => self.duration_s = num(key, value)?,
            "warmup_fraction" => self.warmup_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "cross_verify_probability" => self.validator.cross_verify_probability = num(key, value)?,
            "fallback_rate" => self.validator.fallback_rate = num(key, value)?,
            "fallback_burst" => self.validator.fallback_burst = num(key, value)?,
            "validator_seed" => self.validator.rng_seed = num(key, value)?,
            "reactive_threshold" => self.validator.reactive_threshold = num(key, value)?,
            "reactive_window_s" => self.validator.reactive_window_s = num(key, value)?,
            "filter_elements" => self.filter_elements = num(key, value)?,
            "filter_bits_per_element" => self.filter_bits_per_element = num(key, value)?,
            "filter_hashes" => self.filter_hashes = Some(num(key, value)?),
            "adaptive_fallback" => self.adaptive_fallback = num(key, value)?,
            "reactive_fetch_delay_s" => self.reactive_fetch_delay_s = num(key, value)?,
            "attack_rate" => self.attack = Some(AttackConfig::Clogging { rate: num(key, value)? }),
            "bruteforce_runs" => {
                let runs = num(key, value)?;
                self.attack = Some(match self.attack.take() {
                    Some(AttackConfig::BruteForce { max_trials, lifetime_slots, .. }) => {
                        AttackConfig::BruteForce { runs, max_trials, lifetime_slots }
                    }
                    _ => AttackConfig::BruteForce { runs, max_trials: 100_000_000, lifetime_slots: 1 },
                });
            }
            "bruteforce_max_trials" => {
                let max_trials = num(key, value)?;
                self.attack = Some(match self.attack.take() {
                    Some(AttackConfig::BruteForce { runs, lifetime_slots, .. }) => {
                        AttackConfig::BruteForce { runs, max_trials, lifetime_slots }
                    }
                    _ => AttackConfig::BruteForce { runs: 200, max_trials, lifetime_slots: 1 },
                });
            }
            "lifetime_slots" => {
                let lifetime_slots = num(key, value)?;
                self.attack = Some(match self.attack.take() {
                    Some(AttackConfig::BruteForce { runs, max_trials, .. }) => {
                        AttackConfig::BruteForce { runs, max_trials, lifetime_slots }
                    }
                    _ => AttackConfig::BruteForce {
                        runs: 200,
                        max_trials: 100_000_000,
                        lifetime_slots,
                    },
                });
            }
            "newcomer_vehicles" => self.privacy.newcomer_vehicles = num(key, value)?,
            "pseudonyms_per_vehicle" => self.privacy.pseudonyms_per_vehicle = num(key, value)?,
            "min_batch_vehicles" => self.privacy.min_batch_vehicles = num(key, value)?,
            "initial_vehicles" => self.privacy.initial_vehicles = num(key, value)?,
            other => {
                return Err(SimError::InvalidConfig(format!("unknown config key: {other}")));
            }
        }
        Ok(())
    }

    fn filter_params(&self, seed: u64) -> Result<FilterParams, SimError> {
        let mut params =
            FilterParams::with_bits_per_element(self.filter_elements, self.filter_bits_per_element, seed)?;
        if let Some(k) = self.filter_hashes {
            params.hashes = k;
            params.validate()?;
        }
        Ok(params)
    }

    /// Offered load including the attack stream, for the stability flag.
    pub fn analytic_utilization(&self) -> f64 {
        let n = self.neighbors as f64;
        let new_rate = self.refresh_ratio * n;
        let known_rate = self.beacon_rate * n - new_rate;
        let tau = self.sig_verify_s;
        let h = self.hash_test_s;
        let benign = match self.scheme {
            Scheme::Baseline => new_rate * 2.0 * tau + known_rate * tau,
            Scheme::BfBased => new_rate * (tau + h) + known_rate * tau,
        };
        let attack = match &self.attack {
            Some(AttackConfig::Clogging { rate }) => match self.scheme {
                // The token bucket caps verified fakes at the refill rate;
                // the rest cost one filter test each.
                Scheme::BfBased => rate * h + rate.min(self.validator.fallback_rate) * tau,
                Scheme::Baseline => rate * tau,
            },
            _ => 0.0,
        };
        benign + attack
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    BenignArrival,
    AttackArrival,
    ServiceComplete,
    SnapshotUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    /// Insertion sequence; ties in time are served FIFO.
    seq: u64,
    kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .partial_cmp(&other.time)
            .expect("event times are never NaN")
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    arrival: f64,
    hash_s: f64,
    sig_s: f64,
    benign: bool,
    class1: bool,
    label: &'static str,
}

impl Job {
    fn service_s(&self) -> f64 {
        self.hash_s + self.sig_s
    }
}

/// Clogging-attack counters. `fallback_verifications` is the quantity the
/// token bucket bounds by `burst + rate * duration`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CloggingStats {
    pub injected: u64,
    pub fallback_verifications: u64,
    pub cross_verifications: u64,
    pub message_verifications: u64,
    pub passed_filter: u64,
    pub detected: u64,
    pub dropped_budget: u64,
    pub budget_bound: f64,
    pub snapshot_updates: u64,
    pub final_fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteforceStats {
    pub runs: u32,
    pub successes: u32,
    pub aborted: u32,
    pub mean_trials: f64,
    /// Geometric-oracle expectation `1 / P(pass per candidate)`.
    pub expected_trials: f64,
    /// Per-test pass probability estimate `fill^k` of the built filter.
    pub fp_estimate: f64,
    pub lifetime_slots: u32,
    pub total_filter_tests: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyScenario {
    pub min_batch_vehicles: u64,
    pub anonymity_sets: Vec<u64>,
    pub min_anonymity_set: u64,
    pub mean_anonymity_set: f64,
    pub pending_unpublished: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyStats {
    pub scenarios: Vec<PrivacyScenario>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimReport {
    pub duration_s: f64,
    pub arrivals: u64,
    pub served: u64,
    pub queued_at_end: u64,
    pub rejected: u64,
    /// Served jobs that arrived after warm-up and completed in time; the
    /// population of the mean below.
    pub measured: u64,
    pub mean_system_time_s: f64,
    pub benign_measured: u64,
    pub benign_mean_system_time_s: f64,
    pub class1_served: u64,
    pub class2_served: u64,
    pub outcomes: BTreeMap<String, u64>,
    pub hash_cpu_s: f64,
    pub sig_cpu_s: f64,
    pub analytic_utilization: f64,
    pub stable: bool,
    pub clogging: Option<CloggingStats>,
    pub bruteforce: Option<BruteforceStats>,
    pub privacy: Option<PrivacyStats>,
}

impl SimReport {
    /// Summary in the `metric,value` line protocol.
    pub fn metrics(&self) -> Vec<(String, String)> {
        fn f(v: f64) -> String {
            format!("{v:.8e}")
        }
        let mut rows = vec![
            ("duration_s".into(), f(self.duration_s)),
            ("arrivals".into(), self.arrivals.to_string()),
            ("served".into(), self.served.to_string()),
            ("queued_at_end".into(), self.queued_at_end.to_string()),
            ("rejected".into(), self.rejected.to_string()),
            ("measured".into(), self.measured.to_string()),
            ("mean_system_time_s".into(), f(self.mean_system_time_s)),
            ("benign_measured".into(), self.benign_measured.to_string()),
            ("benign_mean_system_time_s".into(), f(self.benign_mean_system_time_s)),
            ("class1_served".into(), self.class1_served.to_string()),
            ("class2_served".into(), self.class2_served.to_string()),
            ("hash_cpu_s".into(), f(self.hash_cpu_s)),
            ("sig_cpu_s".into(), f(self.sig_cpu_s)),
            ("analytic_utilization".into(), f(self.analytic_utilization)),
            ("stable".into(), u8::from(self.stable).to_string()),
        ];
        for (label, count) in &self.outcomes {
            rows.push((format!("outcome_{label}"), count.to_string()));
        }
        if let Some(c) = &self.clogging {
            rows.push(("attack_injected".into(), c.injected.to_string()));
            rows.push(("attack_fallback_verifications".into(), c.fallback_verifications.to_string()));
            rows.push(("attack_cross_verifications".into(), c.cross_verifications.to_string()));
            rows.push(("attack_message_verifications".into(), c.message_verifications.to_string()));
            rows.push(("attack_passed_filter".into(), c.passed_filter.to_string()));
            rows.push(("attack_detected".into(), c.detected.to_string()));
            rows.push(("attack_dropped_budget".into(), c.dropped_budget.to_string()));
            rows.push(("attack_budget_bound".into(), f(c.budget_bound)));
            rows.push(("snapshot_updates".into(), c.snapshot_updates.to_string()));
            rows.push(("final_fallback_rate".into(), f(c.final_fallback_rate)));
        }
        if let Some(b) = &self.bruteforce {
            rows.push(("bruteforce_runs".into(), b.runs.to_string()));
            rows.push(("bruteforce_successes".into(), b.successes.to_string()));
            rows.push(("bruteforce_aborted".into(), b.aborted.to_string()));
            rows.push(("bruteforce_mean_trials".into(), f(b.mean_trials)));
            rows.push(("bruteforce_expected_trials".into(), f(b.expected_trials)));
            rows.push(("bruteforce_fp_estimate".into(), f(b.fp_estimate)));
            rows.push(("bruteforce_lifetime_slots".into(), b.lifetime_slots.to_string()));
            rows.push(("bruteforce_total_filter_tests".into(), b.total_filter_tests.to_string()));
        }
        if let Some(p) = &self.privacy {
            for s in &p.scenarios {
                let tag = format!("vmin_{}", s.min_batch_vehicles);
                rows.push((format!("privacy_{tag}_updates"), s.anonymity_sets.len().to_string()));
                rows.push((format!("privacy_{tag}_min_set"), s.min_anonymity_set.to_string()));
                rows.push((format!("privacy_{tag}_mean_set"), f(s.mean_anonymity_set)));
                rows.push((format!("privacy_{tag}_pending"), s.pending_unpublished.to_string()));
            }
        }
        rows
    }
}

/// The single-server FIFO verification queue with optional clogging
/// attacker.
struct Engine {
    cfg: SimConfig,
    benign_rng: ChaCha12Rng,
    attack_rng: ChaCha12Rng,
    events: BinaryHeap<std::cmp::Reverse<Event>>,
    seq: u64,
    waiting: VecDeque<Job>,
    in_service: Option<Job>,
    validator: Option<VehicleValidator>,
    latest_snapshot: Option<BloomFilter>,
    update_scheduled: bool,
    report: SimReport,
    warmup_end: f64,
    sum_system: f64,
    benign_sum_system: f64,
    clogging: CloggingStats,
    attack_rate: f64,
}

impl Engine {
    fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let attack_rate = match &cfg.attack {
            Some(AttackConfig::Clogging { rate }) => *rate,
            Some(AttackConfig::BruteForce { .. }) => {
                return Err(SimError::MissingConfig("a clogging attack config, not brute force"))
            }
            None => 0.0,
        };

        // The attack path runs against a real published filter and the real
        // validation pipeline; the filter is only built when needed.
        let (validator, latest_snapshot) = if attack_rate > 0.0 && cfg.scheme == Scheme::BfBased {
            let params = cfg.filter_params(cfg.seed ^ 0x66696c74)?;
            let mut member_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x6d656d62);
            let members: Vec<ElementKey> = (0..cfg.filter_elements)
                .map(|_| ElementKey::new(member_rng.random::<[u8; 16]>().to_vec()).unwrap())
                .collect();
            let coverage = Coverage::new(0, cfg.duration_s.ceil() as u64 + 1);
            let snapshot = BloomFilter::from_keys(&params, 0, coverage, &members)?;
            let scheme = std::sync::Arc::new(MockScheme::seeded(cfg.seed));
            let issuer = crate::credentials::IssuerVerifier {
                public_key: scheme.keygen().public,
                scheme,
            };
            let validator = VehicleValidator::new(
                snapshot.clone(),
                crate::credentials::FakePseudonymList::new(),
                cfg.validator,
                LifetimeMode::Overlapping,
                issuer,
            )?;
            (Some(validator), Some(snapshot))
        } else {
            (None, None)
        };

        let warmup_end = cfg.duration_s * cfg.warmup_fraction;
        let analytic_utilization = cfg.analytic_utilization();
        let mut report = SimReport {
            duration_s: cfg.duration_s,
            analytic_utilization,
            stable: analytic_utilization < 1.0,
            ..SimReport::default()
        };
        if attack_rate >= 0.0 && cfg.attack.is_some() {
            report.clogging = Some(CloggingStats::default());
        }
        Ok(Engine {
            benign_rng: ChaCha12Rng::seed_from_u64(cfg.seed),
            attack_rng: ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x61747461),
            events: BinaryHeap::new(),
            seq: 0,
            waiting: VecDeque::new(),
            in_service: None,
            validator,
            latest_snapshot,
            update_scheduled: false,
            report,
            warmup_end,
            sum_system: 0.0,
            benign_sum_system: 0.0,
            clogging: CloggingStats {
                budget_bound: cfg.validator.fallback_burst
                    + cfg.validator.fallback_rate * cfg.duration_s,
                final_fallback_rate: cfg.validator.fallback_rate,
                ..CloggingStats::default()
            },
            attack_rate,
            cfg,
        })
    }

    fn push_event(&mut self, time: f64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(std::cmp::Reverse(Event { time, seq, kind }));
    }

    fn exp_gap(rng: &mut ChaCha12Rng, rate: f64) -> f64 {
        -(1.0 - rng.random::<f64>()).ln() / rate
    }

    fn schedule_first_arrivals(&mut self) {
        let benign_rate = self.cfg.beacon_rate * self.cfg.neighbors as f64;
        let first = Self::exp_gap(&mut self.benign_rng, benign_rate);
        if first <= self.cfg.duration_s {
            self.push_event(first, EventKind::BenignArrival);
        }
        if self.attack_rate > 0.0 {
            let first = Self::exp_gap(&mut self.attack_rng, self.attack_rate);
            if first <= self.cfg.duration_s {
                self.push_event(first, EventKind::AttackArrival);
            }
        }
    }

    fn enqueue(&mut self, job: Job, now: f64) {
        self.report.arrivals += 1;
        if self.in_service.is_none() {
            self.push_event(now + job.service_s(), EventKind::ServiceComplete);
            self.in_service = Some(job);
        } else {
            self.waiting.push_back(job);
        }
    }

    fn benign_job(&mut self, now: f64) -> Job {
        let class1_probability = self.cfg.refresh_ratio / self.cfg.beacon_rate;
        let class1 = class1_probability > 0.0 && self.benign_rng.random::<f64>() < class1_probability;
        let tau = self.cfg.sig_verify_s;
        let (hash_s, sig_s, label) = match (self.cfg.scheme, class1) {
            // A new pseudonym costs its own signature check in the baseline
            // scheme and one filter test in the filter scheme, on top of
            // the message signature.
            (Scheme::Baseline, true) => (0.0, 2.0 * tau, "benign_new"),
            (Scheme::BfBased, true) => (self.cfg.hash_test_s, tau, "benign_new"),
            (_, false) => (0.0, tau, "benign_known"),
        };
        Job { arrival: now, hash_s, sig_s, benign: true, class1, label }
    }

    fn attack_job(&mut self, now: f64) -> Job {
        self.clogging.injected += 1;
        let tau = self.cfg.sig_verify_s;
        if self.cfg.scheme == Scheme::Baseline {
            // No filter, no budget: every fake costs one verification.
            self.clogging.fallback_verifications += 1;
            return Job {
                arrival: now,
                hash_s: 0.0,
                sig_s: tau,
                benign: false,
                class1: false,
                label: "attack_rejected_bad_signature",
            };
        }
        let key = ElementKey::new(self.attack_rng.random::<[u8; 16]>().to_vec()).unwrap();
        let validator = self.validator.as_mut().expect("attack path has a validator");
        let record = validator.validate_prechecked(now, &key, true, || false);
        let (sig_s, label) = match record.outcome {
            Outcome::RejectedBudgetExhausted => {
                self.clogging.dropped_budget += 1;
                (0.0, "attack_dropped_budget")
            }
            Outcome::RejectedBadSignature => {
                self.clogging.fallback_verifications += 1;
                (tau, "attack_rejected_bad_signature")
            }
            // False positive, not sampled for cross-verification: the
            // pseudonym is accepted, so the message signature is verified
            // (and fails).
            Outcome::AcceptedViaFilter => {
                self.clogging.passed_filter += 1;
                self.clogging.message_verifications += 1;
                (tau, "attack_passed_filter")
            }
            Outcome::DetectedFakeReported => {
                self.clogging.passed_filter += 1;
                self.clogging.detected += 1;
                self.clogging.cross_verifications += 1;
                (tau, "attack_detected")
            }
            Outcome::RejectedFplHit => (0.0, "attack_fpl_hit"),
            other => unreachable!("attack validation cannot yield {other:?}"),
        };
        if self.cfg.adaptive_fallback && validator.needs_reactive_update() && !self.update_scheduled
        {
            self.update_scheduled = true;
            self.push_event(now + self.cfg.reactive_fetch_delay_s, EventKind::SnapshotUpdate);
        }
        Job { arrival: now, hash_s: self.cfg.hash_test_s, sig_s, benign: false, class1: false, label }
    }

    fn complete_service(&mut self, now: f64) {
        let job = self.in_service.take().expect("completion without a job in service");
        self.report.served += 1;
        *self.report.outcomes.entry(job.label.to_owned()).or_insert(0) += 1;
        self.report.hash_cpu_s += job.hash_s;
        self.report.sig_cpu_s += job.sig_s;
        if job.benign {
            if job.class1 {
                self.report.class1_served += 1;
            } else {
                self.report.class2_served += 1;
            }
        }
        if job.arrival >= self.warmup_end {
            let system = now - job.arrival;
            self.report.measured += 1;
            self.sum_system += system;
            if job.benign {
                self.report.benign_measured += 1;
                self.benign_sum_system += system;
            }
        }
        if let Some(next) = self.waiting.pop_front() {
            self.push_event(now + next.service_s(), EventKind::ServiceComplete);
            self.in_service = Some(next);
        }
    }

    fn apply_snapshot_update(&mut self, _now: f64) {
        self.clogging.snapshot_updates += 1;
        self.update_scheduled = false;
        if let (Some(validator), Some(snapshot)) = (&mut self.validator, &self.latest_snapshot) {
            validator
                .apply_update(FilterUpdate::Snapshot(snapshot.clone()))
                .expect("refresh with the latest snapshot cannot be stale");
            // Clogging persists, so the refresh is paired with a harsher
            // fallback budget.
            let halved = validator.fallback_bucket_mut().rate() / 2.0;
            validator.fallback_bucket_mut().set_rate(halved);
            self.clogging.final_fallback_rate = halved;
        }
    }

    fn run(mut self) -> SimReport {
        self.schedule_first_arrivals();
        while let Some(std::cmp::Reverse(event)) = self.events.pop() {
            if event.time > self.cfg.duration_s {
                break;
            }
            match event.kind {
                EventKind::BenignArrival => {
                    let job = self.benign_job(event.time);
                    self.enqueue(job, event.time);
                    let benign_rate = self.cfg.beacon_rate * self.cfg.neighbors as f64;
                    let next = event.time + Self::exp_gap(&mut self.benign_rng, benign_rate);
                    if next <= self.cfg.duration_s {
                        self.push_event(next, EventKind::BenignArrival);
                    }
                }
                EventKind::AttackArrival => {
                    let job = self.attack_job(event.time);
                    self.enqueue(job, event.time);
                    let next = event.time + Self::exp_gap(&mut self.attack_rng, self.attack_rate);
                    if next <= self.cfg.duration_s {
                        self.push_event(next, EventKind::AttackArrival);
                    }
                }
                EventKind::ServiceComplete => self.complete_service(event.time),
                EventKind::SnapshotUpdate => self.apply_snapshot_update(event.time),
            }
        }
        self.report.queued_at_end =
            self.waiting.len() as u64 + u64::from(self.in_service.is_some());
        if self.report.measured > 0 {
            self.report.mean_system_time_s = self.sum_system / self.report.measured as f64;
        }
        if self.report.benign_measured > 0 {
            self.report.benign_mean_system_time_s =
                self.benign_sum_system / self.report.benign_measured as f64;
        }
        if self.report.clogging.is_some() {
            self.report.clogging = Some(self.clogging);
        }
        self.report
    }
}

/// Simulates the two-class M/D/1 verification queue without attackers:
/// Poisson beacon arrivals at rate `gamma * N`, a `c / gamma` fraction of
/// them under new pseudonyms, deterministic per-class service.
pub fn run_queue_sim(cfg: &SimConfig) -> Result<SimReport, SimError> {
    let mut cfg = cfg.clone();
    cfg.attack = None;
    Ok(Engine::new(cfg)?.run())
}

/// Queue simulation with fake-signature pseudonyms injected at the
/// configured clogging rate, driven through the real validation pipeline
/// (filter test, token bucket, optional cross-verification).
pub fn run_clogging_attack(cfg: &SimConfig) -> Result<SimReport, SimError> {
    match &cfg.attack {
        Some(AttackConfig::Clogging { .. }) => Ok(Engine::new(cfg.clone())?.run()),
        _ => Err(SimError::MissingConfig("attack = clogging")),
    }
}

/// Draws random candidate keys against a freshly built desk-scale filter
/// and counts trials until the first false positive, repeated over
/// independent runs. With `lifetime_slots > 1` each candidate key pair is
/// retried across that many non-overlapping lifetime slots.
pub fn run_bruteforce_attack(cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let Some(AttackConfig::BruteForce { runs, max_trials, lifetime_slots }) = cfg.attack else {
        return Err(SimError::MissingConfig("attack = bruteforce"));
    };
    if runs == 0 || lifetime_slots == 0 {
        return Err(SimError::InvalidConfig("bruteforce runs and slots must be positive".into()));
    }

    let params = cfg.filter_params(cfg.seed ^ 0x66696c74)?;
    let mut member_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x6d656d62);
    let members: Vec<ElementKey> = (0..cfg.filter_elements)
        .map(|_| ElementKey::new(member_rng.random::<[u8; 16]>().to_vec()).unwrap())
        .collect();
    let slot_len = 600u64;
    let coverage = Coverage::new(0, slot_len * lifetime_slots as u64);
    let filter = BloomFilter::from_keys(&params, 0, coverage, &members)?;

    let per_test_fp = filter.fill_fraction().powi(params.hashes as i32);
    let per_candidate = 1.0 - (1.0 - per_test_fp).powi(lifetime_slots as i32);

    let mut attack_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x61747461);
    let mut total_trials = 0u64;
    let mut total_tests = 0u64;
    let mut successes = 0u32;
    let mut aborted = 0u32;
    for _ in 0..runs {
        let mut trials = 0u64;
        loop {
            if trials >= max_trials {
                aborted += 1;
                break;
            }
            trials += 1;
            let public_key = attack_rng.random::<[u8; 16]>();
            let mut passed = false;
            for slot in 0..lifetime_slots as u64 {
                let lifetime =
                    Lifetime::new(slot * slot_len, (slot + 1) * slot_len).expect("slots are non-empty");
                let key = crate::credentials::element_key(
                    &public_key,
                    &lifetime,
                    LifetimeMode::NonOverlapping,
                );
                total_tests += 1;
                if filter.query(&key) {
                    passed = true;
                    break;
                }
            }
            if passed {
                successes += 1;
                break;
            }
        }
        total_trials += trials;
    }

    let mut report = SimReport {
        duration_s: 0.0,
        analytic_utilization: 0.0,
        stable: true,
        ..SimReport::default()
    };
    report.bruteforce = Some(BruteforceStats {
        runs,
        successes,
        aborted,
        mean_trials: total_trials as f64 / runs as f64,
        expected_trials: 1.0 / per_candidate,
        fp_estimate: per_test_fp,
        lifetime_slots,
        total_filter_tests: total_tests,
    });
    Ok(report)
}

/// Replays a newcomer arrival schedule through the publication pipeline
/// and measures the per-update anonymity sets, for a batching threshold of
/// one and for the configured threshold.
pub fn run_privacy_experiment(cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let pcfg = &cfg.privacy;
    let mut thresholds = vec![1u64, pcfg.min_batch_vehicles];
    thresholds.dedup();

    let mut scenarios = Vec::new();
    for min_batch in thresholds {
        scenarios.push(privacy_scenario(cfg, min_batch)?);
    }
    let mut report = SimReport {
        duration_s: cfg.duration_s,
        stable: true,
        ..SimReport::default()
    };
    report.privacy = Some(PrivacyStats { scenarios });
    Ok(report)
}

fn privacy_scenario(cfg: &SimConfig, min_batch: u64) -> Result<PrivacyScenario, SimError> {
    let pcfg = &cfg.privacy;
    let per_vehicle = pcfg.pseudonyms_per_vehicle.max(1);
    let total_elements = (pcfg.initial_vehicles as u64 + pcfg.newcomer_vehicles as u64)
        * per_vehicle as u64
        + 1;
    let params = FilterParams::with_bits_per_element(
        total_elements,
        cfg.filter_bits_per_element,
        cfg.seed ^ 0x70726976,
    )?;
    let coverage = Coverage::new(0, 86_400);
    let window = Lifetime::new(0, 86_400).unwrap();
    let registry_config = RegistryConfig::new(params, coverage, LifetimeMode::Overlapping);
    let registry =
        PcaRegistry::new(registry_config, std::sync::Arc::new(MockScheme::seeded(cfg.seed)))?;
    let mut state = PublicationState::new(
        registry,
        PublicationConfig { min_newcomer_vehicles: min_batch, ..PublicationConfig::default() },
    );
    for v in 0..pcfg.initial_vehicles {
        state.registry_mut().issue_batch(&format!("local-{v}"), per_vehicle, window)?;
    }
    state.publish_initial()?;

    // Newcomers appear one at a time at distinct instants; publication
    // happens whenever the buffered distinct-vehicle count reaches the
    // threshold.
    for v in 0..pcfg.newcomer_vehicles {
        state.admit_newcomer(&format!("newcomer-{v}"), per_vehicle, window)?;
    }

    let anonymity_sets: Vec<u64> = state
        .published_log()
        .iter()
        .filter(|rec| rec.newcomer_vehicles > 0)
        .map(|rec| rec.newcomer_vehicles)
        .collect();
    let min = anonymity_sets.iter().copied().min().unwrap_or(0);
    let mean = if anonymity_sets.is_empty() {
        0.0
    } else {
        anonymity_sets.iter().sum::<u64>() as f64 / anonymity_sets.len() as f64
    };
    Ok(PrivacyScenario {
        min_batch_vehicles: min_batch,
        anonymity_sets,
        min_anonymity_set: min,
        mean_anonymity_set: mean,
        pending_unpublished: state.pending_newcomer_vehicles(),
    })
}
