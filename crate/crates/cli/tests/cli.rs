//! End-to-end checks of the `mafl` binary: artifacts land where they
//! should, reruns are byte-identical, and failures come back as JSON error
//! records with a nonzero exit code.

use std::path::Path;
use std::process::{Command, Output};

fn mafl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mafl"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning mafl");
    assert!(
        out.status.success(),
        "expected success\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().expect("spawning mafl");
    assert!(!out.status.success(), "expected a failure exit");
    let stderr = String::from_utf8(out.stderr).expect("stderr utf-8");
    let line = stderr.lines().last().expect("an error record on stderr");
    serde_json::from_str(line).expect("stderr line parses as JSON")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
[rounds]
pretrain = 2
finetune = 3

[task]
dim = 8
num_samples = 24
num_users = 5

[array]
num_elements = 4
aperture_wavelengths = 2.0

[policy]
kind = "topk_snr"
k = 2

[run]
seeds = [1, 2]
"#,
    )
    .unwrap();
    path
}

#[test]
fn run_writes_both_artifacts_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    let stdout = run_ok(mafl().args([
        "run",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out1.to_str().unwrap(),
    ]))
    .stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("policy,k,seed,jain_r30"), "{text}");
    run_ok(mafl().args([
        "run",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out2.to_str().unwrap(),
    ]));
    let log1 = std::fs::read(out1.join("topk_snr_k2_seed7.jsonl")).unwrap();
    let log2 = std::fs::read(out2.join("topk_snr_k2_seed7.jsonl")).unwrap();
    assert!(!log1.is_empty());
    assert_eq!(log1, log2, "same config + seed must reproduce the log bytes");
    let csv = std::fs::read_to_string(out1.join("topk_snr_k2_seed7.csv")).unwrap();
    assert!(csv.starts_with("policy,k,seed,"), "{csv}");
    assert_eq!(csv.lines().count(), 2, "header plus one summary row");
}

#[test]
fn compare_writes_cells_tables_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        run_ok(mafl().args([
            "compare",
            cfg.to_str().unwrap(),
            "--policies",
            "topk_snr,ota_nopc",
            "--k",
            "1,2",
            "--seeds",
            "1,2",
            "--workers",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    for stem in [
        "topk_snr_k1_seed1",
        "topk_snr_k2_seed2",
        "ota_nopc_k1_seed2",
        "ota_nopc_k2_seed1",
    ] {
        assert!(out1.join(format!("{stem}.jsonl")).exists(), "{stem} missing");
    }
    assert!(!out1.join("failures.txt").exists());
    let table1 = std::fs::read(out1.join("comparison.csv")).unwrap();
    let table2 = std::fs::read(out2.join("comparison.csv")).unwrap();
    assert_eq!(table1, table2);
    // header + one row per factorial cell
    let text = String::from_utf8(table1).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2, "{text}");
    let aggs = std::fs::read_to_string(out1.join("comparison_aggregates.csv")).unwrap();
    assert_eq!(aggs.lines().count(), 1 + 4, "{aggs}");
    assert!(aggs.starts_with("policy,k,runs,jain_mean,jain_std"), "{aggs}");
    let cell1 = std::fs::read(out1.join("topk_snr_k1_seed1.jsonl")).unwrap();
    let cell2 = std::fs::read(out2.join("topk_snr_k1_seed1.jsonl")).unwrap();
    assert_eq!(cell1, cell2);
}

#[test]
fn oversubscribed_k_fails_fast_naming_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let record = run_err(mafl().args([
        "compare",
        cfg.to_str().unwrap(),
        "--k",
        "99",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]));
    let msg = record["error"].as_str().unwrap();
    assert!(msg.contains("1 <= k <= num_users"), "{msg}");
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[task]\nbogus_knob = 3\n").unwrap();
    let record = run_err(mafl().args(["run", path.to_str().unwrap()]));
    let msg = record["error"].as_str().unwrap();
    assert!(msg.contains("bogus_knob"), "{msg}");
}

#[test]
fn missing_config_file_reports_a_json_error() {
    let record = run_err(mafl().args(["run", "/nonexistent/nowhere.toml"]));
    let msg = record["error"].as_str().unwrap();
    assert!(msg.contains("nowhere.toml"), "{msg}");
}

#[test]
fn bound_check_honors_the_grid_flag_and_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("bc");
    let stdout = run_ok(mafl().args([
        "bound-check",
        cfg.to_str().unwrap(),
        "--grid",
        "m=0,2;n=4;sigma2=0,0.001",
        "--seeds-per-point",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]))
    .stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("violations: 0 / 4"), "{text}");
    assert!(text.contains("grad_avg="), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bound_check.json")).unwrap())
            .unwrap();
    assert_eq!(report["points"].as_array().unwrap().len(), 4);
    assert_eq!(report["violations"], 0);
}

#[test]
fn env_var_supplies_the_output_root_when_no_flag_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let root = dir.path().join("from_env");
    run_ok(
        mafl()
            .args(["run", cfg.to_str().unwrap(), "--seed", "3"])
            .env("MAFL_OUT_ROOT", root.to_str().unwrap()),
    );
    assert!(root.join("topk_snr_k2_seed3.jsonl").exists());
}

#[test]
fn unknown_policy_name_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let record = run_err(mafl().args([
        "compare",
        cfg.to_str().unwrap(),
        "--policies",
        "psychic_oracle",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]));
    let msg = record["error"].as_str().unwrap();
    assert!(msg.contains("psychic_oracle"), "{msg}");
    assert!(msg.contains("topk_snr"), "{msg}");
}
