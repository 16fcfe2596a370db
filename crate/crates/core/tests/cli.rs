use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use axe_ptq::pipeline::SyntheticLayer;
use axe_ptq::tensor_io::{read_codes, write_codes, write_matrix};
use nalgebra::DMatrix;
use serde_json::Value;

fn axe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn layer_files(dir: &Path) {
    let (w, x) = SyntheticLayer {
        k: 24,
        c: 4,
        d: 48,
        seed: 11,
        correlation: 0.6,
    }
    .generate();
    write_matrix(dir.join("w.axt"), &w).unwrap();
    write_matrix(dir.join("x.axt"), &x).unwrap();
}

#[test]
fn bounds_prints_closed_form_values() {
    let out = axe(&[
        "bounds", "--k", "128", "--m", "4", "--n", "8", "--tile", "32",
    ]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["min_acc_bits"], 20);
    assert_eq!(v["acc_bits"], 20);
    assert_eq!(v["outer_acc_bits"], 22);
    let z = v["l1_budget"].as_f64().unwrap();
    assert!((z - ((1u64 << 20) - 2) as f64 / 255.0).abs() < 1e-9);

    let out = axe(&["bounds", "--k", "64", "--m", "4", "--n", "8", "--signed"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["min_acc_bits"], 18);
}

#[test]
fn bounds_reports_infeasible_limits_without_failing() {
    let out = axe(&["bounds", "--k", "8", "--m", "4", "--n", "8", "--p", "9"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["limits_to_zero"]["upper"].is_number());
    assert!(v["limits_nearest"]["upper"].as_f64().unwrap() > 0.0);
    let out = axe(&["bounds", "--k", "8", "--m", "4", "--n", "8", "--p", "3"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["limits_nearest"]["error"].is_string());
}

#[test]
fn quantize_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    layer_files(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"weight_bits":4,"act_bits":4,"acc_bits":11,"tile":8,"algorithm":"optq","variant":"axe"}"#,
    )
    .unwrap();
    let codes = dir.path().join("q.axt");
    let report = dir.path().join("report.json");
    let out = axe(&[
        "quantize",
        "--weights",
        path(&dir.path().join("w.axt")),
        "--calib",
        path(&dir.path().join("x.axt")),
        "--config",
        path(&cfg),
        "--out",
        path(&codes),
        "--report",
        path(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["config"]["variant"], "axe");
    assert!(rep["certificate"]["per_unit"].as_array().unwrap().len() >= 4 * 3);
    assert_eq!(rep["outer_acc_bits"], 13);
    assert_eq!(read_codes(&codes).unwrap().shape(), (24, 4));

    // every tile fits 11 bits, so the whole channel fits the outer width
    let out = axe(&[
        "verify",
        "--codes",
        path(&codes),
        "--acc-bits",
        "13",
        "--act-bits",
        "4",
    ]);
    assert!(out.status.success());
    let cert: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cert["per_unit"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_exit_code_flags_overflow() {
    let dir = tempfile::tempdir().unwrap();
    let codes = dir.path().join("q.axt");
    write_codes(&codes, &DMatrix::from_element(128, 1, 7i64)).unwrap();
    let cert = dir.path().join("cert.json");
    let ok = axe(&[
        "verify",
        "--codes",
        path(&codes),
        "--acc-bits",
        "19",
        "--act-bits",
        "8",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = axe(&[
        "verify",
        "--codes",
        path(&codes),
        "--acc-bits",
        "18",
        "--act-bits",
        "8",
        "--out",
        path(&cert),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let v: Value = serde_json::from_str(&fs::read_to_string(&cert).unwrap()).unwrap();
    assert_eq!(v["per_unit"][0]["required_bits"], 19);
    assert_eq!(v["per_unit"][0]["pass"], false);
    let tiled = axe(&[
        "verify",
        "--codes",
        path(&codes),
        "--acc-bits",
        "17",
        "--act-bits",
        "8",
        "--tile",
        "32",
    ]);
    assert_eq!(tiled.status.code(), Some(0));
}

#[test]
fn failing_ep_init_certificate_gates_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // all-positive weights: the l1 cap alone cannot keep the positive sum in range
    let w = DMatrix::from_fn(16, 1, |i, _| 0.5 + 0.03 * i as f64);
    let x = DMatrix::from_fn(16, 32, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
    write_matrix(dir.path().join("w.axt"), &w).unwrap();
    write_matrix(dir.path().join("x.axt"), &x).unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"weight_bits":4,"act_bits":4,"acc_bits":10,"algorithm":"gpfq","variant":"ep-init"}"#,
    )
    .unwrap();
    let out = axe(&[
        "quantize",
        "--weights",
        path(&dir.path().join("w.axt")),
        "--calib",
        path(&dir.path().join("x.axt")),
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("q.axt")),
        "--report",
        path(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.axt");
    fs::write(&bogus, b"NOPE0000").unwrap();
    let out = axe(&[
        "verify",
        "--codes",
        path(&bogus),
        "--acc-bits",
        "16",
        "--act-bits",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    layer_files(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"weight_bits":4,"act_bits":8,"acc_bits":4,"algorithm":"gpfq","variant":"axe"}"#,
    )
    .unwrap();
    let out = axe(&[
        "quantize",
        "--weights",
        path(&dir.path().join("w.axt")),
        "--calib",
        path(&dir.path().join("x.axt")),
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("q.axt")),
        "--report",
        path(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn sweep_writes_csv_and_flags_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    layer_files(dir.path());
    let grid = dir.path().join("grid.json");
    fs::write(
        &grid,
        r#"{
            "weight_bits": [3, 4], "act_bits": [4], "acc_bits": [12, 16],
            "algorithm": "gpfq", "variant": "axe",
            "layers": [
                {"files": {"weights": "w.axt", "calib": "x.axt"}},
                {"synthetic": {"k": 16, "c": 2, "d": 32, "seed": 5}}
            ]
        }"#,
    )
    .unwrap();
    let csv_path = dir.path().join("out.csv");
    let out = axe(&["sweep", "--grid", path(&grid), "--out-csv", path(&csv_path)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).any(|l| l.ends_with(",true")));

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"weight_bits": [4], "act_bits": [8], "acc_bits": [4, 20],
            "algorithm": "optq", "variant": "axe",
            "layers": [{"synthetic": {"k": 16, "c": 2, "d": 32, "seed": 5}}]}"#,
    )
    .unwrap();
    let out = axe(&["sweep", "--grid", path(&bad), "--out-csv", path(&csv_path)]);
    assert_eq!(out.status.code(), Some(3));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.contains("infeasible"));
}
