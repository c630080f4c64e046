use std::path::Path;
use std::process::{Command, Output};

use othr_ecm::config::ScenarioConfig;
use othr_ecm::experiment::MetricsReport;

fn othr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_othr"))
        .args(args)
        .output()
        .expect("othr runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn experiment_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = othr(&["experiment", "--case", "5", "--runs", "2", "--seed", "3", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = std::fs::read_to_string(dir.path().join("case5_kappa1.csv")).unwrap();
    let n_targets = ScenarioConfig::reference().targets.len();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 6 * n_targets);
    assert_eq!(&header[..3], &["scan", "run_count", "t1_rmse_range_km"]);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r.split(',').count() == header.len()));
    assert_eq!(
        MetricsReport::rows_from_csv(csv.as_bytes(), n_targets).unwrap().len(),
        30
    );

    let summary = std::fs::read_to_string(dir.path().join("case5_kappa1.summary.toml")).unwrap();
    assert!(summary.contains("case = 5"));
    assert!(summary.contains("reference_case = 4"));
    assert!(summary.contains("excluded_runs = 0"));
}

#[test]
fn csv_only_format_skips_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = othr(&["experiment", "--case", "1", "--runs", "1", "--format", "csv", "--out", out]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("case1_kappa1.csv").exists());
    assert!(!dir.path().join("case1_kappa1.summary.toml").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = ScenarioConfig::reference().to_toml().replace("scans = 30", "scans = 30\nscnas = 3");
    std::fs::write(&bad, text).unwrap();
    let o = othr(&["--config", bad.to_str().unwrap(), "oracle"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("scnas"));

    assert_eq!(code(&othr(&["--config", "/nonexistent/scenario.toml", "oracle"])), 1);
    assert_eq!(code(&othr(&["experiment", "--case", "9", "--runs", "1"])), 1);
    assert_eq!(code(&othr(&["experiment", "--case", "1", "--runs", "0"])), 1);
    assert_eq!(code(&othr(&["experiment", "--runs", "x"])), 1);
}

#[test]
fn aborted_runs_beyond_threshold_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cap.toml");
    let text = ScenarioConfig::reference()
        .to_toml()
        .replace("event_cap = 100000", "event_cap = 1");
    std::fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    let o = othr(&[
        "--config",
        config.to_str().unwrap(),
        "experiment",
        "--case",
        "6",
        "--runs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
    let summary = std::fs::read_to_string(Path::new(&out).join("case6_kappa1.summary.toml")).unwrap();
    assert!(summary.contains("excluded_runs = 2"));
}

#[test]
fn simulate_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = othr(&["simulate", "--seed", "4", "--out", out]);
    assert_eq!(code(&o), 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth_seed4.json")).unwrap()).unwrap();
    assert_eq!(json["scans"].as_array().unwrap().len(), 30);
}

#[test]
fn track_prints_one_row_per_scan() {
    let o = othr(&["track", "--case", "3", "--seed", "2"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn oracle_passes() {
    let o = othr(&["oracle"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("PASS").count(), 4);
}

#[test]
fn bundled_config_is_the_builtin_scenario() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.toml");
    assert_eq!(ScenarioConfig::load(&path).unwrap(), ScenarioConfig::reference());
}
