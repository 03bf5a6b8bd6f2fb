use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpmts_core::sim::generate;
use cpmts_core::{estimate, EstimatorConfig, Scenario, ScenarioConfig};
use nalgebra::DMatrix;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpmts"))
        .args(args)
        .env_remove("CPMTS_SEED")
        .output()
        .expect("run cli")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, scenario: &str, seed: &str) {
    ok(&["simulate", "--scenario", scenario, "--n", "200", "--p", "10", "--q", "8", "--seed", seed, "--out", s(dir)]);
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(|f| f.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn estimate_writes_loadings_and_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("est");
    simulate(&data, "R1", "2");
    ok(&["estimate", "--input", s(&data.join("series.csv")), "--out", s(&out)]);
    let (header, rows) = read_csv(&out.join("loadings_A.csv"));
    let diag = json(&out.join("diagnostics.json"));
    let d = diag["d"].as_u64().unwrap() as usize;
    assert_eq!(header.len(), d);
    assert_eq!(header[0], "a1");
    assert_eq!(rows.len(), 10);
    let (_, rows_b) = read_csv(&out.join("loadings_B.csv"));
    assert_eq!(rows_b.len(), 8);
    assert_eq!(diag["schema"], 1);
    assert_eq!(diag["ranks_pinned"], false);
    let est = json(&out.join("estimate.json"));
    assert_eq!(est["A"].as_array().unwrap().len(), 10);
}

#[test]
fn missing_meta_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("series.csv");
    fs::write(&input, "1,2\n3,4\n").unwrap();
    let out = run(&["estimate", "--input", s(&input), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta not found"));
}

#[test]
fn width_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "R1", "1");
    fs::write(data.join("meta.json"), r#"{"n": 200, "p": 9, "q": 8, "layout": "col-major"}"#).unwrap();
    let out = run(&["estimate", "--input", s(&data.join("series.csv")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected p*q"));
}

#[test]
fn pinned_ranks_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("est");
    simulate(&data, "R2", "3");
    ok(&["estimate", "--input", s(&data.join("series.csv")), "--pin-ranks", "2,3,3", "--out", s(&out)]);
    let diag = json(&out.join("diagnostics.json"));
    assert_eq!(diag["ranks_pinned"], true);
    assert_eq!((diag["d1"].as_u64(), diag["d2"].as_u64(), diag["d"].as_u64()), (Some(2), Some(3), Some(3)));
    assert_eq!(diag["estimator"]["pinned_ranks"], serde_json::json!([2, 3, 3]));
}

#[test]
fn config_file_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("est");
    simulate(&data, "R1", "4");
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"K": 2, "Ktilde": 3, "seed": 11}"#).unwrap();
    ok(&["estimate", "--input", s(&data.join("series.csv")), "--config", s(&cfg), "--K", "4", "--out", s(&out)]);
    let diag = json(&out.join("diagnostics.json"));
    assert_eq!(diag["estimator"]["k"], 4);
    assert_eq!(diag["estimator"]["k_tilde"], 3);
    assert_eq!(diag["estimator"]["seed"], 11);

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    let bad = run(&["estimate", "--input", s(&data.join("series.csv")), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn forecast_writes_one_file_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("fc");
    simulate(&data, "R1", "5");
    ok(&["forecast", "--input", s(&data.join("series.csv")), "--h", "2", "--out", s(&out)]);
    for k in 1..=2 {
        let text = fs::read_to_string(out.join(format!("forecast_h{k}.csv"))).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.split(',').count() == 8));
    }
    assert!(!out.join("forecast_h3.csv").exists());
    let fc = json(&out.join("forecast.json"));
    assert_eq!(fc["h"], 2);
    assert_eq!(fc["method"], "unified");
}

#[test]
fn zero_horizon_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["forecast", "--input", s(&tmp.path().join("x.csv")), "--h", "0", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn latent_on_unidentifiable_series_fails_with_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "R3", "6");
    let input = data.join("series.csv");
    let out_dir = tmp.path().join("fc");
    let args = ["forecast", "--input", s(&input), "--pin-ranks", "2,2,3", "--out", s(&out_dir)];
    let mut latent = args.to_vec();
    latent.extend(["--method", "latent"]);
    let out = run(&latent);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--method unified"));
    ok(&args);
}

#[test]
fn simulate_is_deterministic_and_noise_free_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    simulate(&a, "R2", "9");
    simulate(&b, "R2", "9");
    for f in ["series.csv", "meta.json", "truth_A.csv", "truth_B.csv", "factors.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    ok(&["simulate", "--n", "50", "--p", "6", "--q", "5", "--d", "2", "--noise", "0", "--out", s(&c)]);
    let meta = json(&c.join("meta.json"));
    assert_eq!(meta, serde_json::json!({"n": 50, "p": 6, "q": 5, "layout": "col-major"}));
    let (header, rows) = read_csv(&c.join("series.csv"));
    assert_eq!(header[1], "y2_1");
    assert_eq!(rows.len(), 50);
}

#[test]
fn bench_writes_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "bench", "--n", "120", "--p", "8", "--q", "8", "--reps", "2", "--forecast-steps", "1", "--methods",
        "unified,oracle", "--out", s(&out),
    ]);
    let table = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("scenario,") && lines[1].starts_with("R1,120,8,8,3,"));
    let text = fs::read_to_string(out.join("replications.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["records"].as_array().unwrap().len(), 2);
    assert!(summary["records"][0].get("seconds").is_none());
    let fc = fs::read_to_string(out.join("forecast.csv")).unwrap();
    assert!(fc.contains("unified,1,") && fc.contains("oracle,1,"));
}

#[test]
fn file_round_trip_matches_in_memory_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("est");
    simulate(&data, "R1", "12");
    ok(&["estimate", "--input", s(&data.join("series.csv")), "--seed", "12", "--out", s(&out)]);

    let truth = generate(&ScenarioConfig::new(Scenario::R1, 200, 10, 8, 3).with_seed(12)).unwrap();
    let est = estimate(&truth.series, &EstimatorConfig { seed: 12, ..EstimatorConfig::default() }).unwrap();
    let (_, rows) = read_csv(&out.join("loadings_A.csv"));
    let a = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    assert_eq!(a, est.a);
    let (_, rows) = read_csv(&out.join("loadings_B.csv"));
    let b = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    assert_eq!(b, est.b);
}
