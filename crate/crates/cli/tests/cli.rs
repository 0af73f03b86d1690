use std::path::Path;
use std::process::{Command, Output};

fn parahom(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parahom")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn cell_prints_a_positive_effective_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = parahom(&["cell", "--coeff", "laminate", "--resolution", "64"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["min_eig"].as_f64().unwrap() > 0.0);

    let out = dir.path().join("abar.json");
    let o = parahom(
        &["cell", "--coeff", r#"{"kind": "constant", "value": 3.0}"#, "--resolution", "16", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!((v["min_eig"].as_f64().unwrap() - 3.0).abs() < 1e-10);
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = parahom(&["cell", "--coeff", "no-such-preset"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = parahom(&["solve", "--domain", "torus", "--out", "u.bin"], dir.path());
    assert_eq!(code(&o), 2);
    let o = parahom(&["solve", "--grid", "8", "--out", "u.bin"], dir.path());
    assert_eq!(code(&o), 2);
    let o = parahom(&["homogenize", "--config", "missing.json"], dir.path());
    assert_eq!(code(&o), 2);
    // clap's own usage errors
    let o = parahom(&["diagnose", "--check", "nonsense"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn solve_writes_the_field_and_its_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = parahom(&["solve", "--coeff", "trig", "--grid", "16,8", "--eps", "0.5", "--out", "u.bin"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("u.bin").is_file());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("u.bin.json")).unwrap()).unwrap();
    assert_eq!(side["meta"]["eps"].as_f64(), Some(0.5));
    let field = parahom::pde::ScalarField::read_binary(&dir.path().join("u.bin")).unwrap();
    assert_eq!(field.cells(), 256);
    assert_eq!(field.levels(), 9);
}

#[test]
fn maximal_writes_csv_and_reports_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = parahom(&["maximal", "--coeff", "identity", "--grid", "16,8", "--out", "n.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ratio="));
    let csv = std::fs::read_to_string(dir.path().join("n.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn diagnose_prints_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = parahom(&["diagnose", "--check", "harnack"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().next().unwrap().starts_with("check,"));
    assert!(text.lines().skip(1).all(|l| l.starts_with("harnack")));
}

#[test]
fn homogenize_emits_reports_into_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"cells": 32, "steps": 16, "eps": [0.5, 0.25], "cell_resolution": 32}"#).unwrap();
    let o = parahom(&["homogenize", "--config", "cfg.json", "--format", "csv", "--out-dir", "out"], dir.path());
    assert!(code(&o) == 0 || code(&o) == 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/homogenization.csv").is_file());
    assert!(dir.path().join("out/homogenization.dat").is_file());
}
