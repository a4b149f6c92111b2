//! End-to-end checks of the command-line pipeline on a small platoon, run
//! against the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_deep-lcc")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("deep_lcc_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_CONFIG: &str = r#"
schema_version = 1

[platoon]
n = 3
cav_set = [2]
dt_control = 0.05
dt_sim = 0.01
noise_amplitude = 0.1

[platoon.heterogeneity]
enabled = true
spread = 0.2
seed = 42

[collection]
samples = 150
excitation = 1.0
v_star = 15.0
seed = 3

[controller]
tini = 6
horizon = 10
weight_velocity = 1.0
weight_spacing = 0.5
weight_input = 0.1
lambda_g = 100.0
lambda_y = 10000.0
spacing_error_min = -15.0
spacing_error_max = 20.0
accel_min = -5.0
accel_max = 2.0

[scenario]
profile = "brake"
seed = 1

[scenario.brake]
v_cruise = 15.0
v_low = 8.0
brake_accel = -5.0
recover_accel = 2.0
lead_in = 1.0
hold_low = 2.0
hold_end = 2.0

[output]
dir = "OUTDIR"
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    fs::write(&path, SMALL_CONFIG.replace("OUTDIR", out.to_str().unwrap())).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn assert_code(output: &Output, expected: i32) {
    let code = output.status.code().unwrap_or(-1);
    assert_eq!(
        code,
        expected,
        "exit code {code}, expected {expected}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn collect_analyze_simulate_compare_pipeline() {
    let dir = workdir("pipeline");
    let config = write_config(&dir);
    let config = config.to_str().unwrap();
    let out = dir.join("out");

    // Collect writes the dataset pair and is reproducible.
    let collected = run(&["--config", config, "collect"]);
    assert_code(&collected, 0);
    let csv_a = fs::read(out.join("dataset.csv")).unwrap();
    assert!(fs::metadata(out.join("dataset.json")).is_ok());
    let collected_again = run(&["--config", config, "collect"]);
    assert_code(&collected_again, 0);
    let csv_b = fs::read(out.join("dataset.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "collection is not reproducible");

    // Analyze emits the report schema.
    let analyzed = run(&["--config", config, "analyze"]);
    assert_code(&analyzed, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 3);
    assert_eq!(report["m"], 1);
    assert_eq!(report["condition7"], true);
    assert!(report["controllability"]["rank"].is_number());
    assert!(report["controllability"]["stabilizable"].is_boolean());
    assert!(report["observability"]["rank"].is_number());
    assert!(report["pbh"].is_array());
    // CAV at position 2 leaves the first vehicle uncontrollable but the
    // combined-input variant is fully controllable.
    assert_eq!(report["controllability"]["dim_uncontrollable"], 2);
    let combined = run(&["--config", config, "analyze", "--combined"]);
    assert_code(&combined, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(report["controllability"]["dim_uncontrollable"], 0);

    // All-HDV simulation.
    let hdv = run(&["--config", config, "simulate", "--controller", "none"]);
    assert_code(&hdv, 0);
    let csv = fs::read_to_string(out.join("trajectory_all_hdv.csv")).unwrap();
    assert!(csv.starts_with("t,vehicle_id,position_m,velocity_mps,spacing_m,accel_mps2,is_cav,applied_input_mps2"));

    // Data-driven simulation emits the solver step log and charts.
    let deep = run(&["--config", config, "simulate", "--controller", "deeplcc", "--svg"]);
    assert_code(&deep, 0);
    let jsonl = fs::read_to_string(out.join("solver_deeplcc.jsonl")).unwrap();
    let first = jsonl.lines().next().unwrap();
    let meta: serde_json::Value = serde_json::from_str(first).unwrap();
    for key in ["t", "status", "iterations", "objective", "norm_g", "norm_sigma_y"] {
        assert!(meta.get(key).is_some(), "missing {key} in step log");
    }
    assert!(fs::read_to_string(out.join("velocity_deeplcc.svg")).unwrap().starts_with("<svg"));
    assert!(fs::metadata(out.join("spacing_deeplcc.svg")).is_ok());

    // Comparison with per-phase split is deterministic.
    let compare = run(&["--config", config, "compare", "--phases"]);
    assert_code(&compare, 0);
    let report_a = fs::read(out.join("fuel_report.json")).unwrap();
    let table = String::from_utf8_lossy(&compare.stdout).to_string();
    assert!(table.contains("All HDVs") && table.contains("DeeP-LCC"));
    let compare_again = run(&["--config", config, "compare", "--phases"]);
    assert_code(&compare_again, 0);
    let report_b = fs::read(out.join("fuel_report.json")).unwrap();
    assert_eq!(report_a, report_b, "comparison is not reproducible");
    let parsed: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
    assert!(parsed["all_hdv"]["total_ml"].as_f64().unwrap() > 0.0);
    assert!(parsed["deep_lcc_total_reduction_pct"].is_number());

    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn missing_dataset_is_a_prerequisite_error() {
    let dir = workdir("missing_ds");
    let config = write_config(&dir);
    let output = run(&["--config", config.to_str().unwrap(), "simulate", "--controller", "deeplcc"]);
    assert_code(&output, 4);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("collect"), "error should point at the collect step: {stderr}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn short_collection_fails_with_the_bound() {
    let dir = workdir("short");
    let config = write_config(&dir);
    let output = run(&["--config", config.to_str().unwrap(), "collect", "--T", "30"]);
    assert_code(&output, 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    // (m + 1)(tini + horizon + 2n) - 1 = 2 * 22 - 1 = 43 for this platoon.
    assert!(stderr.contains("43"), "error should cite the minimum length: {stderr}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn config_errors_leave_no_partial_output() {
    let dir = workdir("bad_cfg");
    let path = dir.join("run.toml");
    let out = dir.join("out");
    let bad = SMALL_CONFIG
        .replace("OUTDIR", out.to_str().unwrap())
        .replace("cav_set = [2]", "cav_set = [9]");
    fs::write(&path, bad).unwrap();
    let output = run(&["--config", path.to_str().unwrap(), "collect"]);
    assert_code(&output, 2);
    assert!(!out.exists(), "output directory created despite config error");
    let stderr = String::from_utf8_lossy(&output.stderr);
    let err: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["exit_code"], 2);

    let missing = run(&["--config", dir.join("absent.toml").to_str().unwrap(), "collect"]);
    assert_code(&missing, 4);
    let _ = fs::remove_dir_all(&dir);
}
