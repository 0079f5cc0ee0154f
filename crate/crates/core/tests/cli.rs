use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn recess(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recess"))
        .args(args)
        .env("RECESS_THREADS", "2")
        .output()
        .expect("spawn recess")
}

fn write_config(dir: &Path, v: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small() -> Value {
    json!({
        "task": { "type": "synthetic", "feature_dim": 10, "train_per_class": 300, "test_per_class": 200 },
        "num_clients": 10,
        "rounds": 8,
        "defense": { "type": "recess" },
        "attack": { "kind": { "type": "agr_min_max" } },
        "detection_schedule": { "type": "consecutive", "k": 3 }
    })
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = dir.path().join("out");
    let o = recess(&["run", "--config", &cfg, "--seed", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (header, rows) = read_csv(&out.join("rounds.csv"));
    assert_eq!(header, ["round", "accuracy", "agg_norm", "detection"]);
    assert_eq!(rows.len(), 8);
    let detection: Vec<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(detection, ["0", "1", "1", "1", "0", "0", "0", "0"]);
    for r in &rows {
        let acc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let (header, rows) = read_csv(&out.join("trust.csv"));
    assert_eq!(header, ["round", "client_id", "alpha", "s_c", "trust", "weight", "flagged"]);
    assert!(rows.len() >= 10 * 5, "every aggregation round lists all clients");
    for r in rows.iter().filter(|r| r[0] == "1") {
        assert!(!r[2].is_empty() && !r[3].is_empty(), "detection rows carry alpha and s_c");
        assert!(r[5].is_empty());
    }
    for round in ["0", "5"] {
        let w: f64 = rows
            .iter()
            .filter(|r| r[0] == round && r[6] == "0")
            .map(|r| r[5].parse::<f64>().unwrap())
            .sum();
        assert!((w - 1.0).abs() < 1e-12, "weights sum to {w} in round {round}");
    }

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], json!(2));
    assert_eq!(summary["rounds"], json!(8));
    assert_eq!(summary["num_malicious"], json!(2));
    let flags: Value = serde_json::from_str(&fs::read_to_string(out.join("flags.json")).unwrap()).unwrap();
    assert_eq!(flags["malicious"], json!([0, 1]));
    assert_eq!(flags["flagged"], summary["flagged"]);
}

#[test]
fn summary_echo_reloads_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = dir.path().join("a");
    assert!(recess(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let again = write_config(&dir.path().join("a"), &summary["config"]);
    let out2 = dir.path().join("b");
    assert!(recess(&["run", "--config", &again, "--out", out2.to_str().unwrap()]).status.success());
    assert_eq!(
        fs::read(out.join("summary.json")).unwrap(),
        fs::read(out2.join("summary.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(recess(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));

    let mut bad = small();
    bad["malicious_fraction"] = json!(0.6);
    let cfg = write_config(dir.path(), &bad);
    let o = recess(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));

    let mut typo = small();
    typo["roundz"] = json!(3);
    let cfg = write_config(dir.path(), &typo);
    assert_eq!(recess(&["run", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn probe_prop1_reports_json() {
    let o = recess(&["probe-prop1", "--n", "12", "--c", "2", "--d", "20", "--trials", "60"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n"], json!(12));
    assert_eq!(v["batch_malicious"].as_array().unwrap().len(), 20);
    assert_eq!(recess(&["probe-prop1", "--n", "9", "--c", "4"]).status.code(), Some(1));
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = small();
    base["rounds"] = json!(4);
    let cfg = write_config(dir.path(), &base);
    let out = dir.path().join("sweep");
    let o = recess(&[
        "sweep",
        "--config",
        &cfg,
        "--vary",
        "defense.type=krum,median",
        "--vary",
        "seed=1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let index: Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let points = index.as_array().unwrap();
    assert_eq!(points.len(), 4);
    for p in points {
        let d = Path::new(p["dir"].as_str().unwrap());
        assert!(d.join("summary.json").exists());
        assert!(d.join("no_attack/summary.json").exists());
        assert!(p["summary"]["accuracy_drop"].is_number());
    }
}
