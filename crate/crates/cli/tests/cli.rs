//! Tests against the real `psnym` binary.

use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_psnym"));
    cmd.env("PSNYM_LOG", "off");
    cmd
}

fn out_path(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("psnym-cli-test-{}-{name}", std::process::id()));
    p
}

fn run_to_string(args: &[&str]) -> String {
    let output = bin().args(args).output().expect("spawn psnym");
    assert!(
        output.status.success(),
        "psnym {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

#[test]
fn fig2_hits_published_point() {
    let csv = run_to_string(&["fig2"]);
    let row = csv
        .lines()
        .find(|l| l.starts_with("8.00000000e1,"))
        .expect("row for 80 bits per element");
    let fp: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((1.8e-17..=2.2e-17).contains(&fp), "fp(80) = {fp:e}");
    assert!(!csv.contains('\r'), "LF endings only");
}

#[test]
fn fig4_starts_at_zero() {
    let csv = run_to_string(&["fig4", "--p", "0.5"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("f,flip_probability,compression_rate"));
    let first = lines.next().unwrap();
    assert_eq!(first, "0.00000000e0,0.00000000e0,0.00000000e0");
}

#[test]
fn fig5_matches_queue_model_point() {
    let csv = run_to_string(&["fig5", "--N", "50", "--gamma", "3", "--tau-ms", "4"]);
    let row = csv.lines().find(|l| l.starts_with("6.00000000e-1,")).expect("row for c=0.6");
    let mut cells = row.split(',');
    cells.next();
    let baseline: f64 = cells.next().unwrap().parse().unwrap();
    let bf: f64 = cells.next().unwrap().parse().unwrap();
    assert!((baseline - 11.657142857).abs() < 1e-6, "baseline {baseline}");
    assert!((bf - 7.0).abs() < 1e-12, "bf {bf}");
}

#[test]
fn identical_specs_produce_byte_identical_csv() {
    let a = out_path("det-a.csv");
    let b = out_path("det-b.csv");
    for path in [&a, &b] {
        let status = bin()
            .args([
                "--seed",
                "7",
                "--out",
                path.to_str().unwrap(),
                "queue-sim",
                "--duration",
                "5",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert!(!bytes_a.is_empty());
    std::fs::remove_file(a).ok();
    std::fs::remove_file(b).ok();
}

#[test]
fn unknown_experiment_rejected() {
    let output = bin().arg("fig9").output().unwrap();
    assert!(!output.status.success());
    let output = bin().args(["queue-sim", "--no-such-flag"]).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn bad_config_yields_single_line_diagnostic() {
    let cfg = out_path("bad.cfg");
    std::fs::write(&cfg, "refresh_ratio = 99\n").unwrap();
    let output = bin()
        .args(["--config", cfg.to_str().unwrap(), "queue-sim"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("psnym: error:"));
    std::fs::remove_file(cfg).ok();
}

#[test]
fn queue_sim_reports_model_agreement() {
    let csv = run_to_string(&["--seed", "3", "queue-sim", "--duration", "60"]);
    let rel: f64 = csv
        .lines()
        .find(|l| l.starts_with("relative_error,"))
        .expect("relative_error row")
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(rel < 0.2, "short-run agreement {rel}");
}

#[test]
fn delta_size_stays_within_entropy_ratio() {
    // A smaller filter than the acceptance run keeps this test snappy.
    let csv = run_to_string(&["delta-size", "--n", "20000", "--bits-per-element", "32"]);
    for line in csv.lines().skip(1) {
        let ratio: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert!(ratio <= 3.0, "{line}");
    }
}

#[test]
fn privacy_csv_lists_batches() {
    let csv = run_to_string(&[
        "privacy",
        "--newcomers",
        "12",
        "--psnyms-per-vehicle",
        "2",
        "--v-min",
        "5",
        "--initial-vehicles",
        "3",
    ]);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // v_min=1 exposes 12 singletons, v_min=5 publishes two batches of 5.
    assert_eq!(rows.len(), 14);
    assert!(rows.contains(&"5,0,5"));
    assert!(rows.contains(&"5,1,5"));
}

#[test]
fn snapshot_dump_then_trace_replay() {
    let snapshot = out_path("snapshot.pbf");
    let trace = out_path("trace.csv");
    let outcome = out_path("outcome.csv");
    run_to_string(&[
        "--seed",
        "11",
        "fp-empirical",
        "--n",
        "500",
        "--probes",
        "1000",
        "--dump-snapshot",
        snapshot.to_str().unwrap(),
    ]);

    // First member key, reconstructed from the seeded member stream.
    let mut rng = StdRng::seed_from_u64(11 ^ 0x6d656d62);
    let mut member = [0u8; 16];
    rng.fill(&mut member);
    let member_hex: String = member.iter().map(|b| format!("{b:02x}")).collect();

    std::fs::write(
        &trace,
        format!(
            "arrival_time_s,element_key_hex,has_valid_signature,in_lifetime\n\
             0.1,{member_hex},1,1\n\
             0.2,{member_hex},1,0\n\
             0.3,00112233445566778899aabbccddeeff,1,1\n\
             0.4,00112233445566778899aabbccddeefe,0,1\n"
        ),
    )
    .unwrap();

    let status = bin()
        .args([
            "--out",
            outcome.to_str().unwrap(),
            "validate-trace",
            trace.to_str().unwrap(),
            "--snapshot",
            snapshot.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let log = std::fs::read_to_string(&outcome).unwrap();
    let outcomes: Vec<&str> =
        log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(
        outcomes,
        vec![
            "accepted_via_filter",
            "rejected_lifetime",
            "accepted_via_signature",
            "rejected_bad_signature"
        ]
    );
    for p in [snapshot, trace, outcome] {
        std::fs::remove_file(p).ok();
    }
}

#[test]
fn serve_answers_snapshot_requests() {
    let mut child = bin()
        .args([
            "serve",
            "--addr",
            "127.0.0.1:0",
            "--vehicles",
            "5",
            "--psnyms-per-vehicle",
            "4",
            "--max-connections",
            "1",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut lines = BufReader::new(stdout).lines();
    let banner = lines.next().unwrap().unwrap();
    let addr = banner.strip_prefix("listening ").expect("listening banner");

    let mut stream = TcpStream::connect(addr).unwrap();
    let response = psnym::service::roundtrip(
        &mut stream,
        &psnym::service::Request::GetSnapshot { version: None },
    )
    .unwrap();
    assert_eq!(response.status, psnym::service::Status::Ok);
    // Payload is a signed snapshot: PBF1 body plus trailer.
    assert_eq!(&response.payload[..4], b"PBF1");
    drop(stream);

    let status = child.wait().unwrap();
    assert!(status.success());
}
