//! Experiment runner behind the `psnym` binary: reproduces the evaluation
//! curves as CSV, drives the simulator experiments, serves the publication
//! endpoint over TCP, and replays validation traces.
//!
//! Output rules: CSV uses LF line endings, `.` decimals, and floats
//! rendered at 9 significant digits, so a fixed experiment spec produces
//! byte-identical output. Provenance (the resolved parameter set) goes to
//! stderr, gated by the `PSNYM_LOG` variable (`off`, `info` (default), or
//! `debug`).

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use psnym::analytics::{
    self, avg_system_time, binary_entropy, false_positive_rate, DeltaModelInput, FpModelInput,
    QueueModelParams, Scheme,
};
use psnym::credentials::{Lifetime, LifetimeMode, MockScheme, PcaRegistry, RegistryConfig};
use psnym::filter::{BloomFilter, Coverage, ElementKey, FilterParams};
use psnym::service::{serve_connection, PublicationConfig, PublicationState};
use psnym::sim::{
    run_bruteforce_attack, run_clogging_attack, run_privacy_experiment, run_queue_sim,
    AttackConfig, SimConfig,
};
use psnym::validation::{parse_trace, replay_trace, ValidatorConfig, VehicleValidator};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Nine significant digits, the fixed float format of every CSV cell.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn verbosity() -> u8 {
    match std::env::var("PSNYM_LOG").as_deref() {
        Ok("off") | Ok("0") | Ok("silent") => 0,
        Ok("debug") | Ok("2") => 2,
        _ => 1,
    }
}

fn log_info(msg: impl std::fmt::Display) {
    if verbosity() >= 1 {
        eprintln!("psnym: {msg}");
    }
}

#[derive(Parser, Debug)]
#[command(name = "psnym", version, about = "Bloom-filter pseudonym validation experiments")]
pub struct Cli {
    /// Output path for the experiment CSV (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base RNG seed for the stochastic experiments.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Simulator key/value config file, applied before flag overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub experiment: Experiment,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SimFlags {
    /// Neighbor count N.
    #[arg(long = "N")]
    pub neighbors: Option<u32>,
    /// Neighborhood refresh ratio c (new pseudonyms per vehicle per second).
    #[arg(long)]
    pub c: Option<f64>,
    /// Beacons per vehicle per second.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Signature verification delay, milliseconds.
    #[arg(long)]
    pub tau_ms: Option<f64>,
    /// Filter test cost, microseconds.
    #[arg(long)]
    pub hash_us: Option<f64>,
    /// Validation scheme: baseline or bf.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Simulated duration, seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Cross-verification probability.
    #[arg(long)]
    pub p_cv: Option<f64>,
    /// Fallback budget refill rate, verifications per second.
    #[arg(long)]
    pub fallback_rate: Option<f64>,
    /// Fallback budget burst.
    #[arg(long)]
    pub fallback_burst: Option<f64>,
    /// Filter element count.
    #[arg(long)]
    pub n: Option<u64>,
    /// Filter bits per element.
    #[arg(long)]
    pub bits_per_element: Option<f64>,
    /// Filter hash count (defaults to the optimal for the sizing).
    #[arg(long)]
    pub k: Option<u8>,
}

impl SimFlags {
    fn apply(&self, cfg: &mut SimConfig) -> Result<()> {
        if let Some(v) = self.neighbors {
            cfg.neighbors = v;
        }
        if let Some(v) = self.c {
            cfg.refresh_ratio = v;
        }
        if let Some(v) = self.gamma {
            cfg.beacon_rate = v;
        }
        if let Some(v) = self.tau_ms {
            cfg.sig_verify_s = v / 1e3;
        }
        if let Some(v) = self.hash_us {
            cfg.hash_test_s = v / 1e6;
        }
        if let Some(s) = &self.scheme {
            cfg.scheme = match s.as_str() {
                "baseline" => Scheme::Baseline,
                "bf" => Scheme::BfBased,
                other => bail!("unknown scheme {other:?} (expected baseline or bf)"),
            };
        }
        if let Some(v) = self.duration {
            cfg.duration_s = v;
        }
        if let Some(v) = self.p_cv {
            cfg.validator.cross_verify_probability = v;
        }
        if let Some(v) = self.fallback_rate {
            cfg.validator.fallback_rate = v;
        }
        if let Some(v) = self.fallback_burst {
            cfg.validator.fallback_burst = v;
        }
        if let Some(v) = self.n {
            cfg.filter_elements = v;
        }
        if let Some(v) = self.bits_per_element {
            cfg.filter_bits_per_element = v;
        }
        if let Some(v) = self.k {
            cfg.filter_hashes = Some(v);
        }
        Ok(())
    }
}

#[derive(Subcommand, Debug)]
pub enum Experiment {
    /// False-positive rate as a function of bits per element.
    Fig2 {
        #[arg(long, default_value_t = 8.0)]
        mn_min: f64,
        #[arg(long, default_value_t = 128.0)]
        mn_max: f64,
        #[arg(long, default_value_t = 1.0)]
        mn_step: f64,
    },
    /// Delta compression rate as a function of the added-element fraction.
    Fig4 {
        /// Probability that a bit of the original filter is set.
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 1.0)]
        f_max: f64,
        #[arg(long, default_value_t = 0.01)]
        f_step: f64,
    },
    /// Average system time vs neighborhood refresh ratio, both schemes.
    Fig5 {
        #[arg(long = "N", default_value_t = 50)]
        neighbors: u32,
        #[arg(long, default_value_t = 3.0)]
        gamma: f64,
        #[arg(long, default_value_t = 4.0)]
        tau_ms: f64,
        /// Upper end of the ratio grid; defaults to the largest stable
        /// point.
        #[arg(long)]
        c_max: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        c_step: f64,
    },
    /// Build a filter and measure its false-positive rate empirically.
    FpEmpirical {
        #[arg(long, default_value_t = 10_000)]
        n: u64,
        #[arg(long, default_value_t = 16.0)]
        bits_per_element: f64,
        #[arg(long)]
        k: Option<u8>,
        #[arg(long, default_value_t = 1_000_000)]
        probes: u64,
        /// Also write the built snapshot (for validate-trace).
        #[arg(long)]
        dump_snapshot: Option<PathBuf>,
    },
    /// Serialized delta size against the entropy bound.
    DeltaSize {
        #[arg(long, default_value_t = 100_000)]
        n: u64,
        #[arg(long, default_value_t = 96.0)]
        bits_per_element: f64,
        #[arg(long)]
        k: Option<u8>,
        /// Added-element fractions to evaluate.
        #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.1])]
        f: Vec<f64>,
    },
    /// Verification-queue simulation cross-checked against the analytic
    /// model.
    QueueSim {
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Brute-force search for filter false positives.
    Bruteforce {
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long, default_value_t = 200)]
        runs: u32,
        #[arg(long, default_value_t = 100_000_000)]
        max_trials: u64,
        /// Non-overlapping lifetime slots each key pair is retried over.
        #[arg(long, default_value_t = 1)]
        slots: u32,
    },
    /// Clogging flood against the fallback budget, compared with a clean
    /// run.
    Clogging {
        #[command(flatten)]
        sim: SimFlags,
        /// Fake-signature pseudonyms per second.
        #[arg(long, default_value_t = 1000.0)]
        rate: f64,
    },
    /// Newcomer anonymity sets under the publication batching rule.
    Privacy {
        #[arg(long, default_value_t = 2500)]
        newcomers: u32,
        #[arg(long, default_value_t = 4)]
        psnyms_per_vehicle: u32,
        #[arg(long, default_value_t = 1000)]
        v_min: u64,
        #[arg(long, default_value_t = 20)]
        initial_vehicles: u32,
    },
    /// Serve snapshots, deltas and the FPL over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7700")]
        addr: String,
        #[arg(long, default_value_t = 100)]
        vehicles: u32,
        #[arg(long, default_value_t = 144)]
        psnyms_per_vehicle: u32,
        /// Lifetime mode: overlapping or non-overlapping.
        #[arg(long, default_value = "non-overlapping")]
        mode: String,
        #[arg(long, default_value_t = 16.0)]
        bits_per_element: f64,
        #[arg(long, default_value_t = 1000)]
        v_min: u64,
        /// Stop after this many connections (0 = serve forever).
        #[arg(long, default_value_t = 0)]
        max_connections: u64,
    },
    /// Replay a validation trace against a snapshot.
    ValidateTrace {
        /// Trace CSV: arrival_time_s,element_key_hex,has_valid_signature,in_lifetime.
        trace: PathBuf,
        /// Snapshot file as written by fp-empirical --dump-snapshot.
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        fpl: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        p_cv: f64,
        #[arg(long, default_value_t = 20.0)]
        fallback_rate: f64,
        #[arg(long, default_value_t = 40.0)]
        fallback_burst: f64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let csv = match &cli.experiment {
        Experiment::Serve { .. } => return serve(&cli),
        other => build_csv(other, &cli)?,
    };
    match &cli.out {
        Some(path) => {
            fs::write(path, csv.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
            log_info(format_args!("wrote {}", path.display()));
        }
        None => {
            std::io::stdout().write_all(csv.as_bytes()).context("writing stdout")?;
        }
    }
    Ok(())
}

fn build_csv(experiment: &Experiment, cli: &Cli) -> Result<String> {
    match experiment {
        Experiment::Fig2 { mn_min, mn_max, mn_step } => fig2(*mn_min, *mn_max, *mn_step),
        Experiment::Fig4 { p, f_max, f_step } => fig4(*p, *f_max, *f_step),
        Experiment::Fig5 { neighbors, gamma, tau_ms, c_max, c_step } => {
            fig5(*neighbors, *gamma, *tau_ms, *c_max, *c_step)
        }
        Experiment::FpEmpirical { n, bits_per_element, k, probes, dump_snapshot } => {
            fp_empirical(*n, *bits_per_element, *k, *probes, cli.seed, dump_snapshot.as_deref())
        }
        Experiment::DeltaSize { n, bits_per_element, k, f } => {
            delta_size(*n, *bits_per_element, *k, f, cli.seed)
        }
        Experiment::QueueSim { sim } => {
            let cfg = sim_config(cli, sim, None)?;
            queue_sim(&cfg)
        }
        Experiment::Bruteforce { sim, runs, max_trials, slots } => {
            let attack = AttackConfig::BruteForce {
                runs: *runs,
                max_trials: *max_trials,
                lifetime_slots: *slots,
            };
            let cfg = sim_config(cli, sim, Some(attack))?;
            bruteforce(&cfg)
        }
        Experiment::Clogging { sim, rate } => {
            let cfg = sim_config(cli, sim, Some(AttackConfig::Clogging { rate: *rate }))?;
            clogging(&cfg)
        }
        Experiment::Privacy { newcomers, psnyms_per_vehicle, v_min, initial_vehicles } => {
            privacy(cli, *newcomers, *psnyms_per_vehicle, *v_min, *initial_vehicles)
        }
        Experiment::ValidateTrace {
            trace,
            snapshot,
            fpl,
            p_cv,
            fallback_rate,
            fallback_burst,
        } => validate_trace(
            trace,
            snapshot,
            fpl.as_deref(),
            *p_cv,
            *fallback_rate,
            *fallback_burst,
            cli.seed,
        ),
        Experiment::Serve { .. } => unreachable!("serve is dispatched before CSV building"),
    }
}

fn sim_config(cli: &Cli, flags: &SimFlags, attack: Option<AttackConfig>) -> Result<SimConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            SimConfig::from_kv_text(&text)?
        }
        None => SimConfig::default(),
    };
    cfg.seed = cli.seed;
    flags.apply(&mut cfg)?;
    if attack.is_some() {
        cfg.attack = attack;
    }
    cfg.validate()?;
    log_info(format_args!("resolved config: {cfg:?}"));
    Ok(cfg)
}

fn grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) || max < min {
        bail!("bad grid: min {min}, max {max}, step {step}");
    }
    let count = ((max - min) / step).round() as usize;
    Ok((0..=count).map(|i| min + i as f64 * step).filter(|&x| x <= max + step * 1e-9).collect())
}

fn fig2(mn_min: f64, mn_max: f64, mn_step: f64) -> Result<String> {
    log_info(format_args!("fig2 params: mn_min={mn_min} mn_max={mn_max} mn_step={mn_step}"));
    let mut out = String::from("m_over_n,fp_rate\n");
    for ratio in grid(mn_min, mn_max, mn_step)? {
        let fp = false_positive_rate(FpModelInput::optimal(ratio))?;
        out.push_str(&format!("{},{}\n", sig9(ratio), sig9(fp)));
    }
    Ok(out)
}

fn fig4(p: f64, f_max: f64, f_step: f64) -> Result<String> {
    log_info(format_args!("fig4 params: p={p} f_max={f_max} f_step={f_step}"));
    let mut out = String::from("f,flip_probability,compression_rate\n");
    for f in grid(0.0, f_max, f_step)? {
        let input = DeltaModelInput::new(p, f)?;
        let q = analytics::delta_flip_probability(input);
        out.push_str(&format!("{},{},{}\n", sig9(f), sig9(q), sig9(binary_entropy(q))));
    }
    Ok(out)
}

fn fig5(
    neighbors: u32,
    gamma: f64,
    tau_ms: f64,
    c_max: Option<f64>,
    c_step: f64,
) -> Result<String> {
    let tau = tau_ms / 1e3;
    let params = |c, scheme| QueueModelParams {
        neighbors,
        refresh_ratio: c,
        beacon_rate: gamma,
        sig_verify_s: tau,
        scheme,
    };
    let c_max = match c_max {
        Some(v) => v,
        None => {
            // Largest grid point where both schemes are stable and the
            // class split stays meaningful (c <= gamma).
            let mut limit: Option<f64> = None;
            let mut c = 0.0;
            while c <= gamma {
                if avg_system_time(&params(c, Scheme::Baseline)).is_ok()
                    && avg_system_time(&params(c, Scheme::BfBased)).is_ok()
                {
                    limit = Some(c);
                    c += c_step;
                } else {
                    break;
                }
            }
            limit.ok_or_else(|| {
                anyhow::anyhow!("no stable operating point: N={neighbors} gamma={gamma} tau={tau}")
            })?
        }
    };
    log_info(format_args!(
        "fig5 params: N={neighbors} gamma={gamma} tau_ms={tau_ms} c_max={c_max} c_step={c_step}"
    ));
    let mut out = String::from("c,T_baseline_ms,T_bf_ms\n");
    for c in grid(0.0, c_max, c_step)? {
        let cell = |scheme| match avg_system_time(&params(c, scheme)) {
            Ok(r) => sig9(r.mean_system_time_s * 1e3),
            Err(_) => String::new(),
        };
        out.push_str(&format!(
            "{},{},{}\n",
            sig9(c),
            cell(Scheme::Baseline),
            cell(Scheme::BfBased)
        ));
    }
    Ok(out)
}

fn desk_filter(
    n: u64,
    bits_per_element: f64,
    k: Option<u8>,
    seed: u64,
) -> Result<(FilterParams, Vec<ElementKey>, BloomFilter)> {
    let mut params = FilterParams::with_bits_per_element(n, bits_per_element, seed)?;
    if let Some(k) = k {
        params.hashes = k;
        params.validate()?;
    }
    let mut rng = StdRng::seed_from_u64(seed ^ 0x6d656d62);
    let members: Vec<ElementKey> = (0..n)
        .map(|_| {
            let mut buf = [0u8; 16];
            rng.fill(&mut buf);
            ElementKey::new(buf.to_vec()).unwrap()
        })
        .collect();
    let filter = BloomFilter::from_keys(&params, 0, Coverage::new(0, 86_400), &members)?;
    Ok((params, members, filter))
}

fn fp_empirical(
    n: u64,
    bits_per_element: f64,
    k: Option<u8>,
    probes: u64,
    seed: u64,
    dump_snapshot: Option<&std::path::Path>,
) -> Result<String> {
    log_info(format_args!(
        "fp-empirical params: n={n} bits_per_element={bits_per_element} k={k:?} probes={probes} seed={seed}"
    ));
    let (params, _members, filter) = desk_filter(n, bits_per_element, k, seed)?;
    if let Some(path) = dump_snapshot {
        fs::write(path, filter.encode()).with_context(|| format!("writing {}", path.display()))?;
        log_info(format_args!("snapshot written to {}", path.display()));
    }
    let mut rng = StdRng::seed_from_u64(seed ^ 0x70726f62);
    let mut hits = 0u64;
    for _ in 0..probes {
        let mut buf = [0u8; 16];
        rng.fill(&mut buf);
        if filter.query(&ElementKey::new(buf.to_vec()).unwrap()) {
            hits += 1;
        }
    }
    let observed = hits as f64 / probes as f64;
    let halfpow = 0.5f64.powi(params.hashes as i32);
    let formula =
        false_positive_rate(FpModelInput::with_hashes(bits_per_element, params.hashes as f64))?;
    let sigma = (halfpow * (1.0 - halfpow) / probes as f64).sqrt();
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("n,{n}\n"));
    out.push_str(&format!("bits_per_element,{}\n", sig9(bits_per_element)));
    out.push_str(&format!("hashes,{}\n", params.hashes));
    out.push_str(&format!("fill_fraction,{}\n", sig9(filter.fill_fraction())));
    out.push_str(&format!("probes,{probes}\n"));
    out.push_str(&format!("hits,{hits}\n"));
    out.push_str(&format!("observed_fp,{}\n", sig9(observed)));
    out.push_str(&format!("model_fp_half_power,{}\n", sig9(halfpow)));
    out.push_str(&format!("model_fp_formula,{}\n", sig9(formula)));
    out.push_str(&format!("binomial_sigma,{}\n", sig9(sigma)));
    out.push_str(&format!(
        "within_3_sigma,{}\n",
        u8::from((observed - halfpow).abs() <= 3.0 * sigma)
    ));
    Ok(out)
}

fn delta_size(
    n: u64,
    bits_per_element: f64,
    k: Option<u8>,
    fractions: &[f64],
    seed: u64,
) -> Result<String> {
    log_info(format_args!(
        "delta-size params: n={n} bits_per_element={bits_per_element} k={k:?} f={fractions:?} seed={seed}"
    ));
    let (params, members, old) = desk_filter(n, bits_per_element, k, seed)?;
    let mut out = String::from("f,flips,q_observed,encoded_bytes,entropy_bound_bytes,ratio\n");
    for (i, &f) in fractions.iter().enumerate() {
        if !(f.is_finite() && f >= 0.0) {
            bail!("bad fraction {f}");
        }
        let mut rng = StdRng::seed_from_u64(seed ^ 0x64656c74 ^ (i as u64) << 32);
        let added: Vec<ElementKey> = (0..(f * n as f64).round() as u64)
            .map(|_| {
                let mut buf = [0u8; 16];
                rng.fill(&mut buf);
                ElementKey::new(buf.to_vec()).unwrap()
            })
            .collect();
        let new = BloomFilter::from_keys(
            &params,
            1,
            Coverage::new(0, 86_400),
            members.iter().chain(added.iter()),
        )?;
        let delta = old.delta_to(&new)?;
        if old.apply_delta(&delta)? != new {
            bail!("delta failed to round-trip at f={f}");
        }
        let encoded_bytes = delta.encode().len() as f64;
        let q_observed = delta.flip_count() as f64 / params.bits as f64;
        let bound_bytes = params.bits as f64 * binary_entropy(q_observed) / 8.0;
        let ratio = if bound_bytes > 0.0 { encoded_bytes / bound_bytes } else { f64::INFINITY };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig9(f),
            delta.flip_count(),
            sig9(q_observed),
            encoded_bytes as u64,
            sig9(bound_bytes),
            sig9(ratio)
        ));
    }
    Ok(out)
}

fn metric_rows(report: &psnym::sim::SimReport) -> String {
    let mut out = String::from("metric,value\n");
    for (key, value) in report.metrics() {
        out.push_str(&format!("{key},{value}\n"));
    }
    out
}

fn queue_sim(cfg: &SimConfig) -> Result<String> {
    let report = run_queue_sim(cfg)?;
    let mut out = metric_rows(&report);
    let analytic = avg_system_time(&QueueModelParams {
        neighbors: cfg.neighbors,
        refresh_ratio: cfg.refresh_ratio,
        beacon_rate: cfg.beacon_rate,
        sig_verify_s: cfg.sig_verify_s,
        scheme: cfg.scheme,
    });
    if let Ok(model) = analytic {
        out.push_str(&format!(
            "analytic_mean_system_time_s,{}\n",
            sig9(model.mean_system_time_s)
        ));
        if report.measured > 0 {
            let rel = (report.mean_system_time_s - model.mean_system_time_s).abs()
                / model.mean_system_time_s;
            out.push_str(&format!("relative_error,{}\n", sig9(rel)));
        }
    }
    Ok(out)
}

fn bruteforce(cfg: &SimConfig) -> Result<String> {
    let report = run_bruteforce_attack(cfg)?;
    Ok(metric_rows(&report))
}

fn clogging(cfg: &SimConfig) -> Result<String> {
    let attacked = run_clogging_attack(cfg)?;
    let clean = run_queue_sim(cfg)?;
    let mut out = metric_rows(&attacked);
    out.push_str(&format!(
        "no_attack_benign_mean_system_time_s,{}\n",
        sig9(clean.benign_mean_system_time_s)
    ));
    if clean.benign_mean_system_time_s > 0.0 {
        let degradation = (attacked.benign_mean_system_time_s - clean.benign_mean_system_time_s)
            / clean.benign_mean_system_time_s;
        out.push_str(&format!("benign_degradation,{}\n", sig9(degradation)));
    }
    Ok(out)
}

fn privacy(
    cli: &Cli,
    newcomers: u32,
    psnyms_per_vehicle: u32,
    v_min: u64,
    initial_vehicles: u32,
) -> Result<String> {
    let cfg = SimConfig {
        seed: cli.seed,
        privacy: psnym::sim::PrivacyConfig {
            newcomer_vehicles: newcomers,
            pseudonyms_per_vehicle: psnyms_per_vehicle,
            min_batch_vehicles: v_min,
            initial_vehicles,
        },
        ..SimConfig::default()
    };
    log_info(format_args!("privacy params: {:?}", cfg.privacy));
    let report = run_privacy_experiment(&cfg)?;
    let stats = report.privacy.expect("privacy experiment reports privacy stats");
    let mut out = String::from("v_min,update_index,anonymity_set\n");
    for scenario in &stats.scenarios {
        for (idx, set) in scenario.anonymity_sets.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", scenario.min_batch_vehicles, idx, set));
        }
        log_info(format_args!(
            "v_min={}: {} updates, min set {}, mean set {}, pending {}",
            scenario.min_batch_vehicles,
            scenario.anonymity_sets.len(),
            scenario.min_anonymity_set,
            sig9(scenario.mean_anonymity_set),
            scenario.pending_unpublished
        ));
    }
    Ok(out)
}

fn validate_trace(
    trace_path: &std::path::Path,
    snapshot_path: &std::path::Path,
    fpl_path: Option<&std::path::Path>,
    p_cv: f64,
    fallback_rate: f64,
    fallback_burst: f64,
    seed: u64,
) -> Result<String> {
    log_info(format_args!(
        "validate-trace params: trace={} snapshot={} p_cv={p_cv} fallback_rate={fallback_rate} fallback_burst={fallback_burst} seed={seed}",
        trace_path.display(),
        snapshot_path.display()
    ));
    let trace_text = fs::read_to_string(trace_path)
        .with_context(|| format!("reading {}", trace_path.display()))?;
    let rows = parse_trace(&trace_text)?;
    let snapshot_bytes =
        fs::read(snapshot_path).with_context(|| format!("reading {}", snapshot_path.display()))?;
    let snapshot = BloomFilter::decode(&snapshot_bytes)?;
    let fpl = match fpl_path {
        Some(path) => psnym::credentials::FakePseudonymList::decode(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => psnym::credentials::FakePseudonymList::new(),
    };
    // Trace rows carry their own signature verdicts, so the issuer
    // identity is never consulted.
    let scheme = Arc::new(MockScheme::seeded(seed));
    let issuer = psnym::credentials::IssuerVerifier {
        public_key: vec![0],
        scheme,
    };
    let mut validator = VehicleValidator::new(
        snapshot,
        fpl,
        ValidatorConfig {
            cross_verify_probability: p_cv,
            fallback_rate,
            fallback_burst,
            rng_seed: seed,
            ..ValidatorConfig::default()
        },
        LifetimeMode::Overlapping,
        issuer,
    )?;
    let log = replay_trace(&mut validator, &rows);
    let mut out = String::from("time,outcome,hash_ops,sig_verifies\n");
    for (time, record) in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            sig9(time),
            record.outcome.label(),
            record.hash_ops,
            record.signature_verifications
        ));
    }
    Ok(out)
}

fn serve(cli: &Cli) -> Result<()> {
    let Experiment::Serve {
        addr,
        vehicles,
        psnyms_per_vehicle,
        mode,
        bits_per_element,
        v_min,
        max_connections,
    } = &cli.experiment
    else {
        unreachable!("serve() is only called for the serve experiment");
    };
    let mode = match mode.as_str() {
        "overlapping" => LifetimeMode::Overlapping,
        "non-overlapping" => LifetimeMode::NonOverlapping,
        other => bail!("unknown lifetime mode {other:?}"),
    };
    let n = *vehicles as u64 * *psnyms_per_vehicle as u64;
    let params = FilterParams::with_bits_per_element(n.max(1), *bits_per_element, cli.seed)?;
    let coverage = Coverage::new(0, 86_400);
    let config = RegistryConfig::new(params, coverage, mode);
    let mut registry = PcaRegistry::new(config, Arc::new(MockScheme::seeded(cli.seed)))?;
    let window = Lifetime::new(0, 86_400).unwrap();
    for v in 0..*vehicles {
        registry.issue_batch(&format!("veh-{v:04}"), *psnyms_per_vehicle, window)?;
    }
    let mut state = PublicationState::new(
        registry,
        PublicationConfig { min_newcomer_vehicles: *v_min, ..PublicationConfig::default() },
    );
    let version = state.publish_initial()?;
    log_info(format_args!(
        "serving {} pseudonyms for {} vehicles, snapshot v{version}, on {addr}",
        n, vehicles
    ));

    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    // The resolved address goes to stdout so callers can script against
    // an OS-assigned port.
    println!("listening {}", listener.local_addr()?);
    std::io::stdout().flush().ok();
    let mut served = 0u64;
    for stream in listener.incoming() {
        let mut stream = stream.context("accepting connection")?;
        if let Err(e) = serve_connection(&mut state, &mut stream) {
            log_info(format_args!("connection error: {e}"));
        }
        served += 1;
        if *max_connections > 0 && served >= *max_connections {
            break;
        }
    }
    Ok(())
}
