use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn prac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prac"))
        .args(args)
        .env_remove("PRAC_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--output-dir", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    prac(&full)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn memory_report_prints_gelu_down_pair() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("gelu-down-pair.json");
    let out = run_in(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "memory-report"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let pair = text
        .lines()
        .find(|l| l.starts_with("gelu+down pair"))
        .expect("pair line");
    let fields: Vec<&str> = pair.split_whitespace().collect();
    assert_eq!(&fields[2..4], ["128", "64"], "{pair}");

    let mut reader = csv::Reader::from_path(tmp.path().join("ledger.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let gelu = rows.iter().find(|r| &r[0] == "mlp.gelu.input").unwrap();
    assert_eq!((&gelu[3], &gelu[4]), ("64", "32"));
    assert!(tmp.path().join("ledger.txt").exists());
    assert!(tmp.path().join("ledger.json").exists());
}

#[test]
fn counterexample_keeps_w2_constant() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["counterexample", "--steps", "100000"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let verdict = read_json(&tmp.path().join("counterexample-verdict.json"));
    assert_eq!(verdict["w2_constant"], Value::Bool(true));
    assert_eq!(verdict["steps"], 100_000);
    assert_eq!(verdict["max_selection_w2_constant"], Value::Bool(true));
    assert!(verdict["unbiased_first_hit"].as_u64().unwrap() <= 10_000);
    let trajectory = std::fs::read_to_string(tmp.path().join("trajectory-biased.csv")).unwrap();
    assert_eq!(trajectory.lines().count(), 100_002);
}

#[test]
fn unknown_key_exits_2_with_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "{\n  \"seed\": 1,\n  \"polcy\": {}\n}\n");
    let out = run_in(tmp.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("config.json:3:"), "{err}");
    assert!(err.contains("polcy"), "{err}");
}

#[test]
fn out_of_range_value_exits_2_with_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "{\n  \"policy\": {\n    \"mode\": \"prac\",\n    \"nonlinear_rank_fraction\": 0.8\n  }\n}\n",
    );
    let out = run_in(tmp.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("config.json:4:"), "{err}");
    assert!(err.contains("nonlinear_rank_fraction"), "{err}");
}

#[test]
fn estimator_test_on_diag_fixture_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{
  "trials": 20000,
  "estimator": {
    "cells": [
      {
        "matrix": { "kind": "diag", "values": [10.0, 1.0, 1.0, 1.0] },
        "mode": "prac",
        "r1": 1,
        "r2": 1
      }
    ]
  }
}"#,
    );
    let out = run_in(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "estimator-test"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_json(&tmp.path().join("estimator-report.json"));
    assert_eq!(report["passed"], Value::Bool(true));
    let rec = &report["cells"][0]["reconstruction"];
    let (mse, se) = (
        rec["mse"].as_f64().unwrap(),
        rec["mse_stderr"].as_f64().unwrap(),
    );
    assert_eq!(rec["theory_mse"].as_f64().unwrap(), 6.0);
    assert!((mse - 6.0).abs() <= 3.0 * se + 1e-9, "{mse} +- {se}");
}

#[test]
fn failing_check_exits_1_and_names_it() {
    let tmp = TempDir::new().unwrap();
    // A zero tolerance cannot absorb any Monte Carlo noise.
    let cfg = write_config(
        tmp.path(),
        r#"{
  "trials": 1000,
  "projector_moment": { "cases": [{ "dim": 6, "r1": 2, "r2": 2 }], "entry_z": 1e-12 }
}"#,
    );
    let out = run_in(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "projector-moment"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("FAILED: moment dim=6 r1=2 r2=2"));
}

#[test]
fn train_then_reconcile() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    let out = run_in(&run_dir, &["train", "--steps", "30"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let mut reader = csv::Reader::from_path(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["step", "loss", "grad_norm", "act_scalars", "wall_ms"]
    );
    assert_eq!(reader.records().count(), 30);
    let summary = read_json(&run_dir.join("summary.json"));
    assert_eq!(summary["steps_completed"], 30);

    let report_dir = tmp.path().join("report");
    let out = run_in(
        &report_dir,
        &["memory-report", "--reconcile", run_dir.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let rec = read_json(&report_dir.join("reconcile.json"));
    assert_eq!(rec["passed"], Value::Bool(true));
    assert_eq!(rec["report"]["steps_checked"], 30);

    // The run used rank fraction 0.3 on linear inputs; a ledger built with
    // 0.2 disagrees first on the up-projection input.
    let cfg = write_config(
        tmp.path(),
        "{ \"policy\": { \"linear_rank_fraction\": 0.2 } }",
    );
    let bad_dir = tmp.path().join("bad");
    let out = run_in(
        &bad_dir,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "memory-report",
            "--reconcile",
            run_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let rec = read_json(&bad_dir.join("reconcile.json"));
    assert_eq!(rec["passed"], Value::Bool(false));
    assert!(
        rec["failure"].as_str().unwrap().contains("`mlp.up.input`"),
        "{rec}"
    );
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let out = run_in(
        &first,
        &["--seed", "9", "train", "--steps", "20", "--mode", "rac"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let effective = read_json(&first.join("effective-config.json"));
    assert_eq!(effective["seed"], 9);
    assert_eq!(effective["steps"], 20);
    assert_eq!(effective["policy"]["mode"], "rac");
    // Defaults are materialized.
    assert_eq!(effective["policy"]["principal_interval"], 500);
    assert_eq!(effective["arch"]["m"], 40);

    let second = tmp.path().join("second");
    let cfg = first.join("effective-config.json");
    let out = run_in(&second, &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let losses = |dir: &Path| -> Vec<String> {
        let mut r = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
        r.records().map(|rec| rec.unwrap()[1].to_string()).collect()
    };
    assert_eq!(losses(&first), losses(&second));
}

#[test]
fn output_dir_precedence() {
    let tmp = TempDir::new().unwrap();
    let from_config = tmp.path().join("from-config");
    let from_env = tmp.path().join("from-env");
    let from_flag = tmp.path().join("from-flag");
    let cfg = write_config(
        tmp.path(),
        &format!(
            "{{ \"output_dir\": {} }}",
            serde_json::to_string(from_config.to_str().unwrap()).unwrap()
        ),
    );
    let cfg = cfg.to_str().unwrap();
    let bin = env!("CARGO_BIN_EXE_prac");

    let status = Command::new(bin)
        .args(["--config", cfg, "sgd-bound"])
        .env_remove("PRAC_OUTPUT_DIR")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(from_config.join("sgd-bound-verdict.json").exists());

    let status = Command::new(bin)
        .args(["--config", cfg, "sgd-bound"])
        .env("PRAC_OUTPUT_DIR", &from_env)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(from_env.join("sgd-bound-verdict.json").exists());

    let status = Command::new(bin)
        .args([
            "--config",
            cfg,
            "--output-dir",
            from_flag.to_str().unwrap(),
            "sgd-bound",
        ])
        .env("PRAC_OUTPUT_DIR", &from_env)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(from_flag.join("sgd-bound-verdict.json").exists());
}

#[test]
fn profile_and_k_sweep_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["profile-spectrum"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let profile = read_json(&tmp.path().join("profile.json"));
    assert_eq!(profile["profile"]["s"], 2);
    assert!((profile["profile"]["q"].as_f64().unwrap() - 62.0).abs() < 1e-8);
    let spectrum = std::fs::read_to_string(tmp.path().join("spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().count(), 65);

    let out = run_in(tmp.path(), &["k-sweep", "--steps", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut r = csv::Reader::from_path(tmp.path().join("k-sweep.csv")).unwrap();
    let multipliers: std::collections::BTreeSet<String> =
        r.records().map(|rec| rec.unwrap()[0].to_string()).collect();
    assert_eq!(multipliers.len(), 4);
    assert!(multipliers.contains("0.2") && multipliers.contains("1.2"));
}
