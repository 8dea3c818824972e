//! Closed-form models: Bloom-filter false-positive rate as a function of
//! bits per element, delta compression rate, updated-bit probability, and
//! the two-class M/D/1 average system time for message verification.
//!
//! All functions are pure. The simulator cross-validates the queue model;
//! the filter tests cross-validate the false-positive model.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("queue unstable: utilization {utilization:.4} >= 1")]
    Unstable { utilization: f64 },
}

/// Real-valued false-positive-optimal hash count `(m/n) ln 2`.
///
/// The analytic curves use this unrounded value; concrete filters round it
/// (see [`crate::filter::optimal_hash_count`]).
pub fn optimal_hash_count_real(bits_per_element: f64) -> f64 {
    bits_per_element * std::f64::consts::LN_2
}

/// False-positive model input: bits per element, with an optional explicit
/// hash count. When absent the optimal real-valued count is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpModelInput {
    pub bits_per_element: f64,
    pub hashes: Option<f64>,
}

impl FpModelInput {
    pub fn optimal(bits_per_element: f64) -> Self {
        FpModelInput { bits_per_element, hashes: None }
    }

    pub fn with_hashes(bits_per_element: f64, hashes: f64) -> Self {
        FpModelInput { bits_per_element, hashes: Some(hashes) }
    }
}

/// `(1 - e^{-k n/m})^k`; with optimal k this reduces to `0.5^{(m/n) ln 2}`.
pub fn false_positive_rate(input: FpModelInput) -> Result<f64, AnalyticsError> {
    let ratio = input.bits_per_element;
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(AnalyticsError::Domain("bits per element must be positive"));
    }
    let k = match input.hashes {
        Some(k) if k.is_finite() && k > 0.0 => k,
        Some(_) => return Err(AnalyticsError::Domain("hash count must be positive")),
        None => optimal_hash_count_real(ratio),
    };
    Ok((1.0 - (-k / ratio).exp()).powf(k))
}

/// Delta model input: `fill_probability` is the chance a bit in the original
/// filter is 1 (1/2 for an optimally sized filter), `added_fraction` the
/// fraction of elements added on top of the original set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaModelInput {
    pub fill_probability: f64,
    pub added_fraction: f64,
}

impl DeltaModelInput {
    pub fn new(fill_probability: f64, added_fraction: f64) -> Result<Self, AnalyticsError> {
        if !(fill_probability.is_finite() && fill_probability > 0.0 && fill_probability < 1.0) {
            return Err(AnalyticsError::Domain("fill probability must be in (0, 1)"));
        }
        if !(added_fraction.is_finite() && added_fraction >= 0.0) {
            return Err(AnalyticsError::Domain("added fraction must be non-negative"));
        }
        Ok(DeltaModelInput { fill_probability, added_fraction })
    }

    pub fn added(added_fraction: f64) -> Result<Self, AnalyticsError> {
        Self::new(0.5, added_fraction)
    }
}

/// Probability that a bit differs between the original and updated filter:
/// `q = p (1 - p^f)`.
pub fn delta_flip_probability(input: DeltaModelInput) -> f64 {
    let p = input.fill_probability;
    p * (1.0 - p.powf(input.added_fraction))
}

/// Binary entropy `H(q)` in bits, with the convention `0 log 0 = 0`.
pub fn binary_entropy(q: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&q));
    if q == 0.0 || q == 1.0 {
        return 0.0;
    }
    -q * q.log2() - (1.0 - q) * (1.0 - q).log2()
}

/// Compressed delta size per original filter bit: `H(q)` with `q` from
/// [`delta_flip_probability`].
pub fn compression_rate(input: DeltaModelInput) -> f64 {
    binary_entropy(delta_flip_probability(input))
}

/// Fill probability after an update: `p' = p + (1-p) q`.
pub fn updated_bit_probability(fill_probability: f64, flip_probability: f64) -> f64 {
    fill_probability + (1.0 - fill_probability) * flip_probability
}

/// Validation scheme whose verification load is being modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Every new pseudonym costs a PCA-signature verification on top of the
    /// message verification.
    Baseline,
    /// New pseudonyms are validated by filter tests; only the message
    /// signature is verified.
    BfBased,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::BfBased => "bf",
        }
    }
}

/// Two-class M/D/1 input: `N` neighbors each beaconing `gamma` times per
/// second, of which a `refresh_ratio` fraction per second arrive under new
/// pseudonyms; `sig_verify_s` is one ECDSA verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueModelParams {
    pub neighbors: u32,
    pub refresh_ratio: f64,
    pub beacon_rate: f64,
    pub sig_verify_s: f64,
    pub scheme: Scheme,
}

impl QueueModelParams {
    fn validate(&self) -> Result<(), AnalyticsError> {
        if self.neighbors == 0 {
            return Err(AnalyticsError::Domain("neighbor count must be at least 1"));
        }
        if !(self.refresh_ratio.is_finite() && self.refresh_ratio >= 0.0) {
            return Err(AnalyticsError::Domain("refresh ratio must be non-negative"));
        }
        if !(self.beacon_rate.is_finite() && self.beacon_rate > 0.0) {
            return Err(AnalyticsError::Domain("beacon rate must be positive"));
        }
        if self.refresh_ratio > self.beacon_rate {
            return Err(AnalyticsError::Domain("new-pseudonym rate cannot exceed beacon rate"));
        }
        if !(self.sig_verify_s.is_finite() && self.sig_verify_s > 0.0) {
            return Err(AnalyticsError::Domain("verification delay must be positive"));
        }
        Ok(())
    }

    /// Class arrival rates `(cN, gamma N - cN)` in messages per second.
    pub fn class_rates(&self) -> (f64, f64) {
        let n = self.neighbors as f64;
        let new_rate = self.refresh_ratio * n;
        (new_rate, self.beacon_rate * n - new_rate)
    }

    /// Class service times `(S1, S2)` in seconds.
    pub fn class_service_times(&self) -> (f64, f64) {
        let tau = self.sig_verify_s;
        match self.scheme {
            Scheme::Baseline => (2.0 * tau, tau),
            Scheme::BfBased => (tau, tau),
        }
    }

    /// Offered load `rho = lambda1 S1 + lambda2 S2`.
    pub fn utilization(&self) -> f64 {
        let (l1, l2) = self.class_rates();
        let (s1, s2) = self.class_service_times();
        l1 * s1 + l2 * s2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueModelResult {
    pub mean_service_s: f64,
    pub utilization: f64,
    pub mean_system_time_s: f64,
}

/// Average system time of the two-class M/D/1 verification queue:
/// `T = S + (lambda1 S1^2 + lambda2 S2^2) / (2 (1 - rho))`.
pub fn avg_system_time(params: &QueueModelParams) -> Result<QueueModelResult, AnalyticsError> {
    params.validate()?;
    let (l1, l2) = params.class_rates();
    let (s1, s2) = params.class_service_times();

    // Equal service times collapse to a single class; evaluating the
    // collapsed form keeps the result exactly independent of the split.
    let (total_rate, utilization, residual_numerator) = if s1 == s2 {
        let rate = params.beacon_rate * params.neighbors as f64;
        (rate, rate * s2, rate * s2 * s2)
    } else {
        (l1 + l2, l1 * s1 + l2 * s2, l1 * s1 * s1 + l2 * s2 * s2)
    };

    if utilization >= 1.0 {
        return Err(AnalyticsError::Unstable { utilization });
    }
    let mean_service_s = utilization / total_rate;
    let mean_system_time_s = mean_service_s + residual_numerator / (2.0 * (1.0 - utilization));
    Ok(QueueModelResult { mean_service_s, utilization, mean_system_time_s })
}

/// Sweep row for the system-time experiment: one refresh ratio, one value
/// per scheme (absent when that scheme is unstable at this point).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTimeRow {
    pub refresh_ratio: f64,
    pub baseline_s: Option<f64>,
    pub bf_s: Option<f64>,
}

/// System time as a function of the refresh ratio, for both schemes.
pub fn system_time_sweep(
    neighbors: u32,
    beacon_rate: f64,
    sig_verify_s: f64,
    refresh_ratios: &[f64],
) -> Result<Vec<SystemTimeRow>, AnalyticsError> {
    refresh_ratios
        .iter()
        .map(|&c| {
            let mut row = SystemTimeRow { refresh_ratio: c, baseline_s: None, bf_s: None };
            for scheme in [Scheme::Baseline, Scheme::BfBased] {
                let params = QueueModelParams {
                    neighbors,
                    refresh_ratio: c,
                    beacon_rate,
                    sig_verify_s,
                    scheme,
                };
                match avg_system_time(&params) {
                    Ok(r) => match scheme {
                        Scheme::Baseline => row.baseline_s = Some(r.mean_system_time_s),
                        Scheme::BfBased => row.bf_s = Some(r.mean_system_time_s),
                    },
                    Err(AnalyticsError::Unstable { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(row)
        })
        .collect()
}

/// False-positive rate over a bits-per-element grid at optimal hash count.
pub fn fp_rate_sweep(grid: &[f64]) -> Result<Vec<(f64, f64)>, AnalyticsError> {
    grid.iter()
        .map(|&r| Ok((r, false_positive_rate(FpModelInput::optimal(r))?)))
        .collect()
}

/// Flip probability and compression rate over an added-fraction grid.
pub fn compression_sweep(
    fill_probability: f64,
    added_fractions: &[f64],
) -> Result<Vec<(f64, f64, f64)>, AnalyticsError> {
    added_fractions
        .iter()
        .map(|&f| {
            let input = DeltaModelInput::new(fill_probability, f)?;
            let q = delta_flip_probability(input);
            Ok((f, q, binary_entropy(q)))
        })
        .collect()
}
