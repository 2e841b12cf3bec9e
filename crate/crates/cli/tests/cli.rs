use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gcr(args: &[&str]) -> Output {
    gcr_env(args, &[])
}

fn gcr_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gcr"));
    cmd.args(args).env_remove("GCR_CACHE_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn gcr")
}

fn ok(args: &[&str]) -> String {
    let out = gcr(args);
    assert!(
        out.status.success(),
        "gcr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_spec(dir: &Path) -> PathBuf {
    let p = dir.join("spec.json");
    std::fs::write(
        &p,
        r#"{"num_categories": 3, "dim": 8, "grid": [4, 4], "components_per_category": 2,
            "train_images": 4, "test_normal_images": 6, "test_anomalous_images": 6, "seed": 3}"#,
    )
    .unwrap();
    p
}

fn synth(dir: &Path, spec: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--spec", s(spec), "--out", s(&data)]);
    data.join("manifest.jsonl")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn build_bank_writes_bank_directory() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let banks = dir.path().join("banks");
    ok(&["build-bank", "--manifest", s(&m), "--category", "cat01", "--K", "8", "--seed", "7", "--out", s(&banks)]);
    for f in ["prototypes.gcrf", "weights.gcrf", "meta.json"] {
        assert!(banks.join("cat01").join(f).is_file(), "{f}");
    }
    let meta = read_json(&banks.join("cat01/meta.json"));
    assert_eq!(meta["k"], 8);
    assert_eq!(meta["seed"], 7);
    assert!(!banks.join("cat01/log_precisions.gcrf").exists());

    ok(&["build-bank", "--manifest", s(&m), "--category", "cat02", "--K", "8", "--ema", "on", "--out", s(&banks)]);
    assert!(banks.join("cat02/log_precisions.gcrf").is_file());
}

#[test]
fn build_bank_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let missing = gcr(&["build-bank", "--manifest", s(&m), "--K", "8"]);
    assert_eq!(missing.status.code(), Some(2));
    let zero = gcr(&["build-bank", "--manifest", s(&m), "--category", "cat00", "--K", "0"]);
    assert!(!zero.status.success());
    assert_ne!(zero.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("K must be at least 1"));
    let unknown = gcr(&["build-bank", "--manifest", s(&m), "--category", "nope", "--K", "8", "--out", s(dir.path())]);
    assert!(!unknown.status.success());
}

#[test]
fn config_file_then_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"coreset": {"k": 4, "seed": 9}}"#).unwrap();
    let banks = dir.path().join("banks");
    ok(&["build-bank", "--manifest", s(&m), "--category", "cat00", "--config", s(&cfg), "--out", s(&banks)]);
    let meta = read_json(&banks.join("cat00/meta.json"));
    assert_eq!((meta["k"].as_u64(), meta["seed"].as_u64()), (Some(4), Some(9)));
    ok(&["build-bank", "--manifest", s(&m), "--category", "cat00", "--config", s(&cfg), "--K", "6", "--out", s(&banks)]);
    let meta = read_json(&banks.join("cat00/meta.json"));
    assert_eq!((meta["k"].as_u64(), meta["seed"].as_u64()), (Some(6), Some(9)));

    std::fs::write(&cfg, r#"{"coreset": {"kk": 4}}"#).unwrap();
    let bad = gcr(&["build-bank", "--manifest", s(&m), "--category", "cat00", "--config", s(&cfg)]);
    assert!(!bad.status.success());
}

#[test]
fn synth_then_eval_continual_reports_zero_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let rep = dir.path().join("report");
    let stdout = ok(&["eval-continual", "--manifest", s(&m), "--K", "16", "--out", s(&rep)]);
    assert!(stdout.contains("FM[auroc] = 0.0000"), "{stdout}");
    for f in ["step_1.json", "step_2.json", "step_3.json", "eval_matrix.csv", "fm.json", "routes.csv", "scores.csv"] {
        assert!(rep.join(f).is_file(), "{f}");
    }
    let fm = read_json(&rep.join("fm.json"));
    assert_eq!(fm["per_metric"]["auroc"]["overall"], 0.0);
    assert_eq!(fm["order"], serde_json::json!(["cat00", "cat01", "cat02"]));

    // A second run against the populated cache produces identical reports.
    let first: Vec<Vec<u8>> = ["step_3.json", "eval_matrix.csv", "fm.json", "routes.csv"]
        .iter()
        .map(|f| std::fs::read(rep.join(f)).unwrap())
        .collect();
    ok(&["eval-continual", "--manifest", s(&m), "--K", "16", "--out", s(&rep)]);
    let second: Vec<Vec<u8>> = ["step_3.json", "eval_matrix.csv", "fm.json", "routes.csv"]
        .iter()
        .map(|f| std::fs::read(rep.join(f)).unwrap())
        .collect();
    assert_eq!(first, second);
}

#[test]
fn cache_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let cache = dir.path().join("elsewhere");
    let rep = dir.path().join("report");
    let out = gcr_env(
        &["eval-continual", "--manifest", s(&m), "--K", "8", "--out", s(&rep)],
        &[("GCR_CACHE_DIR", &cache)],
    );
    assert!(out.status.success());
    assert!(std::fs::read_dir(&cache).unwrap().next().is_some());
    assert!(!rep.join("cache").exists());
}

#[test]
fn tampered_cache_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let rep = dir.path().join("report");
    ok(&["eval-continual", "--manifest", s(&m), "--K", "8", "--out", s(&rep)]);
    let key = std::fs::read_dir(rep.join("cache")).unwrap().next().unwrap().unwrap().path();
    let w = key.join("cat01/weights.gcrf");
    let mut bytes = std::fs::read(&w).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    std::fs::write(&w, bytes).unwrap();
    let out = gcr(&["eval-continual", "--manifest", s(&m), "--K", "8", "--out", s(&rep)]);
    assert!(!out.status.success());
}

fn routing_accuracy(rep: &Path, step: usize) -> f64 {
    read_json(&rep.join(format!("step_{step}.json")))["routing"]["all"].as_f64().unwrap()
}

#[test]
fn routing_rule_ablation_on_scale_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("inflated.json");
    std::fs::write(&spec, r#"{"anomaly_shift": 50.0, "inflate": {"category": 0, "factor": 10.0}}"#).unwrap();
    let m = synth(dir.path(), &spec);
    let geo = dir.path().join("geo");
    let sb = dir.path().join("sb");
    ok(&["eval-continual", "--manifest", s(&m), "--K", "196", "--routing", "geometry", "--out", s(&geo)]);
    ok(&["eval-continual", "--manifest", s(&m), "--K", "196", "--routing", "score-based", "--out", s(&sb)]);
    assert_eq!(routing_accuracy(&geo, 5), 1.0);
    assert!(routing_accuracy(&sb, 5) < 1.0);
}

fn auroc_matrix(rep: &Path) -> Vec<f64> {
    std::fs::read_to_string(rep.join("eval_matrix_auroc.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).filter(|c| !c.is_empty()).map(|c| c.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn nll_and_energy_give_equal_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let e = dir.path().join("energy");
    let n = dir.path().join("nll");
    let common = ["--K", "16", "--ema", "on", "--tau", "0.5"];
    let mut a = vec!["eval-continual", "--manifest", s(&m), "--scoring", "energy", "--out", s(&e)];
    a.extend(common);
    ok(&a);
    let mut b = vec!["eval-continual", "--manifest", s(&m), "--scoring", "nll", "--out", s(&n)];
    b.extend(common);
    ok(&b);
    let (x, y) = (auroc_matrix(&e), auroc_matrix(&n));
    assert_eq!(x.len(), 6);
    for (p, q) in x.iter().zip(&y) {
        assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
    }
}

#[test]
fn bench_rows_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let rep = dir.path().join("report");
    ok(&["bench", "--manifest", s(&m), "--K", "16,512", "--warmup", "3", "--out", s(&rep)]);
    let b = read_json(&rep.join("bench.json"));
    let rows = b["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let lat = |i: usize| rows[i]["latency_ms"].as_f64().unwrap();
    assert_eq!(rows[1]["k"], 512);
    assert!(lat(1) >= lat(0), "{} < {}", lat(1), lat(0));
}

#[test]
fn ksweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let rep = dir.path().join("report");
    let stdout = ok(&["ksweep", "--manifest", s(&m), "--K", "4,16", "--out", s(&rep)]);
    assert!(stdout.contains("routed/oracle mismatches: 0"), "{stdout}");
    let csv = std::fs::read_to_string(rep.join("ksweep.csv")).unwrap();
    assert!(csv.starts_with("k,category,oracle_auroc,routed_auroc,fm\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn score_routes_to_owning_category() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let banks = dir.path().join("banks");
    for c in ["cat00", "cat01", "cat02"] {
        // K larger than the training pool keeps every training patch.
        ok(&["build-bank", "--manifest", s(&m), "--category", c, "--K", "1000", "--out", s(&banks)]);
    }
    let feat = dir.path().join("data/features/cat01_train_002.gcrf");
    let map = dir.path().join("map.gcrf");
    let stdout = ok(&[
        "score", "--image-features", s(&feat), "--banks", s(&banks), "--agg", "min", "--image-size", "32x32",
        "--out", s(&map),
    ]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["routed"], "cat01");
    // Every patch is a prototype: its distance is zero and the min-form energy
    // reduces to the uniform log-weight, log K.
    let k = read_json(&banks.join("cat01/meta.json"))["k"].as_f64().unwrap();
    let score = v["image_score"].as_f64().unwrap();
    assert!((score - k.ln()).abs() < 1e-5, "{score} vs {}", k.ln());
    let bytes = std::fs::read(&map).unwrap();
    assert_eq!(&bytes[..4], b"GCRF");
}

#[test]
fn route_writes_per_candidate_distances() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &small_spec(dir.path()));
    let banks = dir.path().join("banks");
    for c in ["cat00", "cat01", "cat02"] {
        ok(&["build-bank", "--manifest", s(&m), "--category", c, "--K", "8", "--out", s(&banks)]);
    }
    let out = dir.path().join("routes.csv");
    let stdout = ok(&["route", "--manifest", s(&m), "--banks", s(&banks), "--out", s(&out)]);
    assert!(stdout.contains("accuracy 1.0000"), "{stdout}");
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("image_id,true_category,routed,r_cat00,r_cat01,r_cat02\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 12);
}

#[test]
fn help_documents_defaults() {
    let help = ok(&["eval-continual", "--help"]);
    for needle in [
        "[default: 1]",
        "[default: 0.01]",
        "[default: 196]",
        "[default: geometry]",
        "[default: energy]",
        "[default: lse]",
        "[default: off]",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
    for cmd in ["build-bank", "score", "route", "ksweep", "bench", "synth"] {
        ok(&[cmd, "--help"]);
    }
}
