use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kmarkov::estimator::AccumulatorBank;
use kmarkov::markov::{matrix_power, reference_chain_3, CovariatePoint};
use kmarkov::matfun::spectral_norm;
use kmarkov::simulator::{write_jsonl, Observation, SamplePath};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn kmarkov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmarkov")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const PLAIN: &str = r#"{
  // three states, no covariates
  "sim": {"truth": "three", "n_paths": 40, "seed": 9}
}"#;

const COVARIATE: &str = r#"{
  "sim": {"truth": "three", "with_covariates": true, "n_paths": 120, "seed": 4},
  "estimator": {"schedule": {"c": 1.0, "alpha": 0.2, "sigma_scale": 0.22}},
  "grid": [{"continuous": [1.5], "discrete": [1]}]
}"#;

#[test]
fn simulate_writes_n_lines_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", PLAIN);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("sub/b.jsonl");
    assert!(kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&b)]).status.success());
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 40);
    assert!(dir.path().join("manifest.jsonl").exists());

    let c = dir.path().join("c.jsonl");
    kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "10"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn negative_gap_mean_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"sim": {"n_paths": 5, "gap_means": [10, -1, 15]}}"#);
    let out = kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gap_means"));
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", "{\n  \"sim\": {\"n_paths\": 5,}\n}");
    let out = kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(kmarkov(&["estimate", "--lags", "7"]).status.code(), Some(1));
    assert_eq!(kmarkov(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(kmarkov(&["--help"]).status.code(), Some(0));
}

#[test]
fn empty_dataset_warns_or_fails_strictly() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "empty.jsonl", "");
    let out_json = dir.path().join("est.json");
    let out = kmarkov(&["estimate", s(&data), "--out", s(&out_json)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let report: Value = serde_json::from_slice(&std::fs::read(&out_json).unwrap()).unwrap();
    assert!(report["points"].as_array().unwrap().iter().all(|p| p["ok"] == false));

    let strict = kmarkov(&["estimate", s(&data), "--out", s(&out_json), "--strict"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn bad_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "bad.jsonl", "{\"path_id\": 0, \"y0\": 1, \"events\": [[2, 1]]}\nnot json\n");
    let out = kmarkov(&["estimate", s(&data), "--out", s(&dir.path().join("e.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn lags_flag_restricts_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"sim": {"n_paths": 400, "seed": 2}}"#);
    let data = dir.path().join("d.jsonl");
    kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let est = dir.path().join("e.json");
    let out = kmarkov(&["estimate", s(&data), "--config", s(&cfg), "--lags", "8:12", "--out", s(&est)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(&est).unwrap()).unwrap();
    assert_eq!(report["lags"]["lo"], 8);
    let weights = report["points"][0]["estimate"]["weights"].as_object().unwrap();
    assert!(!weights.is_empty());
    for k in weights.keys() {
        let l: usize = k.parse().unwrap();
        assert!((8..=12).contains(&l));
    }
    let per_lag = report["points"][0]["estimate"]["per_lag"].as_object().unwrap();
    assert!(per_lag.values().any(|l| l["a_hat"].is_object() && l["p_hat"].is_object()));
}

fn sample_from(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.len() - 1
}

#[test]
fn exact_power_oracle_dataset_recovers_p() {
    // Transitions are drawn directly from P^ℓ, independently of the
    // simulator.
    let p = reference_chain_3();
    let powers: Vec<_> = (1..=20).map(|l| matrix_power(&p, l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let paths: Vec<SamplePath> = (0..100_000u64)
        .map(|id| {
            let y0 = rng.gen_range(0..3);
            let mut state = y0;
            let mut events = Vec::new();
            for _ in 0..2 {
                let gap = rng.gen_range(6..=20);
                state = sample_from(&mut rng, &powers[gap - 1].row(state));
                events.push(Observation { gap, state });
            }
            SamplePath { path_id: id, covariates: CovariatePoint::unconditional(), initial_state: y0, events }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("oracle.jsonl");
    write_jsonl(&paths, std::fs::File::create(&data).unwrap()).unwrap();
    let est = dir.path().join("e.json");
    let out = kmarkov(&["estimate", s(&data), "--lags", "6:20", "--out", s(&est)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(&est).unwrap()).unwrap();
    let rows = &report["points"][0]["estimate"]["aggregated"]["rows"];
    let flat: Vec<f64> = rows
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
        .collect();
    let p_hat = DMatrix::from_row_slice(3, 3, &flat);
    let err = spectral_norm(&(p_hat - p.as_matrix()));
    assert!(err < 1e-2, "spectral error {err}");
}

fn load_bank(p: &Path) -> AccumulatorBank {
    AccumulatorBank::load_checkpoint(std::fs::File::open(p).unwrap()).unwrap()
}

#[test]
fn update_in_pieces_matches_single_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", COVARIATE);
    let all = dir.path().join("all.jsonl");
    kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&all)]);
    let text = std::fs::read_to_string(&all).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let a = write(dir.path(), "a.jsonl", &(lines[..70].join("\n") + "\n"));
    let b = write(dir.path(), "b.jsonl", &(lines[70..].join("\n") + "\n"));

    let ck_a = dir.path().join("ck_a.json");
    let ck_ab = dir.path().join("ck_ab.json");
    let ck_all = dir.path().join("ck_all.json");
    assert!(kmarkov(&["update", s(&a), "--config", s(&cfg), "--out", s(&ck_a)]).status.success());
    let o = kmarkov(&["update", s(&b), "--config", s(&cfg), "--checkpoint", s(&ck_a), "--out", s(&ck_ab)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(kmarkov(&["update", s(&all), "--config", s(&cfg), "--out", s(&ck_all)]).status.success());

    let x = load_bank(&ck_ab);
    let y = load_bank(&ck_all);
    assert_eq!(x.n_paths(), 120);
    for (u, v) in x.raw_u_t().iter().zip(y.raw_u_t()).chain(x.raw_u_b().iter().zip(y.raw_u_b())) {
        assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0), "{u} vs {v}");
    }

    // Estimating from the checkpoint alone gives the same report as from the data.
    let e1 = dir.path().join("e1.json");
    let e2 = dir.path().join("e2.json");
    kmarkov(&["estimate", "--checkpoint", s(&ck_ab), "--config", s(&cfg), "--out", s(&e1)]);
    kmarkov(&["estimate", s(&all), "--config", s(&cfg), "--out", s(&e2)]);
    let r1: Value = serde_json::from_slice(&std::fs::read(&e1).unwrap()).unwrap();
    let r2: Value = serde_json::from_slice(&std::fs::read(&e2).unwrap()).unwrap();
    let m = |r: &Value| r["points"][0]["estimate"]["aggregated"]["rows"].clone();
    let (m1, m2) = (m(&r1), m(&r2));
    for (a, b) in m1
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .zip(m2.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()))
    {
        assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12);
    }
}

#[test]
fn update_with_empty_dataset_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", COVARIATE);
    let data = dir.path().join("d.jsonl");
    kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let ck = dir.path().join("ck.json");
    kmarkov(&["update", s(&data), "--config", s(&cfg), "--out", s(&ck)]);
    let empty = write(dir.path(), "empty.jsonl", "");
    let ck2 = dir.path().join("ck2.json");
    assert!(kmarkov(&["update", s(&empty), "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&ck2)])
        .status
        .success());
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

#[test]
fn update_with_different_alpha_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", COVARIATE);
    let data = dir.path().join("d.jsonl");
    kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let ck = dir.path().join("ck.json");
    kmarkov(&["update", s(&data), "--config", s(&cfg), "--out", s(&ck)]);
    let other = write(dir.path(), "o.json", &COVARIATE.replace("\"alpha\": 0.2", "\"alpha\": 0.25"));
    let out = kmarkov(&[
        "update",
        s(&data),
        "--config",
        s(&other),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule"));
}

#[test]
fn checkpoint_with_wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", COVARIATE);
    let data = dir.path().join("d.jsonl");
    kmarkov(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let ck = dir.path().join("ck.json");
    kmarkov(&["update", s(&data), "--config", s(&cfg), "--out", s(&ck)]);
    let text = std::fs::read_to_string(&ck).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    let bad = write(dir.path(), "bad.json", &text);
    let out = kmarkov(&[
        "update",
        s(&data),
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&bad),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 9"));
}

#[test]
fn experiment_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.json",
        r#"{
          "sim": {"truth": "three", "with_covariates": true, "seed": 1},
          "grid": [{"continuous": [1.5], "discrete": [1]}, {"continuous": [1.5], "discrete": [0]}],
          "experiment": {"n_values": [100, 200], "replications": 2}
        }"#,
    );
    let out_dir = dir.path().join("nested/results");
    let started = std::time::Instant::now();
    let out = kmarkov(&["--threads", "2", "experiment", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed().as_secs() < 60);
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let summary: Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 4);
    assert_eq!(summary["spec"]["estimator"]["schedule"]["c"], 1.0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("median"));
    assert!(out_dir.join("manifest.jsonl").exists());
}
