use std::path::Path;
use std::process::{Command, Output};

use lbpo::harness::{read_metrics, ExperimentConfig, CSV_HEADER};

fn lbpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbpo")).args(args).output().expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn train_writes_header_rows_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = lbpo(&["train", "--seed", "3", "--epochs", "3", "--trajectories", "10", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(text.lines().next().unwrap(), "epoch,return,cost_undisc,cost_disc,epsilon,violated,kl,linesearch_steps,backtracked");
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    // Floats carry 17 significant digits.
    let field = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    assert!(field.contains('e') && field.split('e').next().unwrap().len() == 18, "{field}");
    assert!(out.join("policy_epoch_0000.bin").exists());
    let saved = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!((saved.seed, saved.epochs, saved.trajectories_per_epoch), (3, 3, 10));
}

#[test]
fn stdout_csv_matches_file_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = ["train", "--seed", "5", "--epochs", "2", "--trajectories", "10", "--algo", "backtrack"];
    let printed = lbpo(&args);
    assert!(printed.status.success());
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    assert!(lbpo(&with_out).status.success());
    assert_eq!(printed.stdout, std::fs::read(out.join("metrics.csv")).unwrap());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, r#"{"env": {"kind": "didactic", "threshold": 3.5}, "epochs": 1, "trajectories_per_epoch": 8, "seed": 1}"#);
    let out = dir.path().join("run");
    let res = lbpo(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "2", "--beta", "0.02", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let saved = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(saved.epochs, 2);
    assert_eq!(saved.beta, 0.02);
    assert_eq!(saved.trajectories_per_epoch, 8);
    assert_eq!(saved.env.horizon(), 10);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    for text in [r#"{"epochs": 1, "epoch_count": 3}"#, r#"{"env": {"kind": "didactic", "colour": 1}}"#, r#"{"env": {"kind": "maze"}}"#] {
        write(&cfg, text);
        let res = lbpo(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(2), "{text}");
        assert!(String::from_utf8_lossy(&res.stderr).contains("config"));
    }
}

#[test]
fn bad_flag_values_fail_cleanly() {
    assert_eq!(lbpo(&["train", "--algo", "ppo"]).status.code(), Some(2));
    assert_eq!(lbpo(&["train", "--env", "mujoco"]).status.code(), Some(2));
    assert_eq!(lbpo(&["train", "--trajectories", "0"]).status.code(), Some(2));
    assert!(!lbpo(&["train", "--seed", "-1"]).status.success());
}

#[test]
fn verify_oracle_passes() {
    let res = lbpo(&["verify-oracle", "--seed", "9", "--instances", "3", "--policies", "10"]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("certified_policies 30"));
    assert!(text.contains("safety_exceptions 0"));
    assert!(text.trim_end().ends_with("PASS"));
}

#[test]
fn sweeps_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, r#"{"env": {"kind": "didactic", "threshold": 3.5}, "epochs": 2, "q_epochs": 5, "policy_hidden": [8], "q_hidden": [8]}"#);
    let c = cfg.to_str().unwrap();

    let out = dir.path().join("samples");
    let res = lbpo(&["sweep-samples", "--config", c, "--samples", "8,12", "--seeds", "0", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = std::fs::read_to_string(out.join("sweep_samples.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "algo,n=8,n=12");
    assert!(lines[1].starts_with("lbpo,") && lines[2].starts_with("backtrack,"));

    let res = lbpo(&["sweep-beta", "--config", c, "--betas", "0.005,0.02", "--seeds", "0,1"]);
    assert!(res.status.success());
    let table = String::from_utf8(res.stdout).unwrap();
    assert!(table.lines().all(|l| l.split(',').count() == 5));
    assert_eq!(table.lines().count(), 1 + 2 + 2);

    let res = lbpo(&["report", out.to_str().unwrap()]);
    assert!(res.status.success());
    let report = String::from_utf8(res.stdout).unwrap();
    assert_eq!(report.lines().count(), 1 + 4);
    assert!(report.contains("backtrack_n12_beta0.005_seed0,2,"));
}
