use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn gibbslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gibbslab")).args(args).output().expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn normalize_constant_potential() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gibbslab(&[
        "run", "--experiment", "normalize", "--potential", "const:1.0", "--d", "2",
        "--output", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let result = json(&dir.join("result.json"));
    for c in result["normalized"]["coeffs"].as_array().unwrap() {
        assert!((c.as_f64().unwrap() + 2f64.ln()).abs() <= 1e-12);
    }
    let manifest = json(&dir.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config"]["potential"], "const:1.0");
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(manifest["residuals"]["normalization_defect"].as_f64().unwrap() <= 1e-12);
    let table = fs::read_to_string(dir.join("table.csv")).unwrap();
    assert!(table.lines().skip(1).all(|l| l.starts_with("1,")));
}

#[test]
fn curvature_is_nonnegative() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gibbslab(&[
        "run", "--backend", "shift", "--d", "2", "--k", "2", "--experiment", "curvature", "--seed", "7",
        "--output", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result = json(&run_dir(&out).join("result.json"));
    assert!(result["K_formula"].as_f64().unwrap() >= 0.0);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |root: &Path, workers: &'static str| {
        gibbslab(&[
            "run", "--experiment", "scan", "--samples", "3", "--seed", "11", "--workers", workers,
            "--output", root.to_str().unwrap(),
        ])
    };
    let (oa, ob) = (args(a.path(), "1"), args(b.path(), "2"));
    assert_eq!(oa.status.code(), Some(0));
    assert_eq!(ob.status.code(), Some(0));
    let (da, db) = (run_dir(&oa), run_dir(&ob));
    assert_eq!(da.file_name(), db.file_name(), "content-addressed directory names");
    for f in ["result.json", "table.csv"] {
        assert_eq!(digest(&da.join(f)), digest(&db.join(f)), "{f}");
    }
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"experiment": "gibbs", "d": 3, "k": 1, "potential": "const:0.5"}"#).unwrap();
    let out = gibbslab(&[
        "run", "--config", cfg.to_str().unwrap(), "--potential", "const:0", "--output", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result = json(&run_dir(&out).join("result.json"));
    assert!((result["lambda"].as_f64().unwrap() - 3.0).abs() <= 1e-12);
}

#[test]
fn validation_error_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gibbslab(&["run", "--d", "1", "--output", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let manifest = json(&run_dir(&out).join("manifest.json"));
    assert_eq!(manifest["status"], "validation_error");
    assert!(manifest["error"].as_str().unwrap().contains("d = 1"));
    assert!(!run_dir(&out).join("result.json").exists());

    let missing = gibbslab(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn accuracy_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gibbslab(&[
        "run", "--experiment", "geodesic", "--energy-tol", "1e-30", "--output", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&run_dir(&out).join("manifest.json"));
    assert_eq!(manifest["status"], "numerical_failure");
    assert!(manifest["error"].is_string());
}

#[test]
fn circle_backend_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gibbslab(&[
        "run", "--backend", "circle", "--experiment", "converge", "--axis", "n", "--n", "128", "--potential",
        "cos:0.3", "--output", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result = json(&run_dir(&out).join("result.json"));
    assert!(result["ratios"].as_array().unwrap().iter().all(|r| r.as_f64().unwrap() >= 3.0));
}

#[test]
fn single_acceptance_criterion() {
    let out = gibbslab(&["acceptance", "--criterion", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("PASS criterion  1"), "{text}");
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(gibbslab(&["acceptance", "--criterion", "13"]).status.code(), Some(2));
}
