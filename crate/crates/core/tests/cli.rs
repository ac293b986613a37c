use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
seed = 4

[target]
dim = 3
n_train = 3000

[schedule]
steps = 6

[metrics]
repetitions = 2
n_generate = 800
n_reference = 800
n_slices = 20

[metrics.max_sw]
restarts = 2
max_iter = 100

[bound]
n = 2000
"#;

fn shorthorizon(dir: &Path, args: &[&str]) -> String {
    let config = dir.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shorthorizon"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--output-dir")
        .arg(dir.join("run"))
        .env_remove("SHORTHORIZON_OUTPUT_DIR")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn run_writes_metrics_bound_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    shorthorizon(dir.path(), &["run"]);
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("metric,repetition,value"));
    assert_eq!(lines.count(), 2 * 5);
    assert!(run.join("bound.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metrics"]["swd"]["n"], 2);
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("seed = 4"));
}

#[test]
fn sample_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("gen.csv");
    let csv_arg = csv.to_str().unwrap();
    shorthorizon(dir.path(), &["sample", "--n", "500", "--out", csv_arg, "--init", "empirical"]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("x0,x1,x2"));
    assert_eq!(text.lines().count(), 501);
    let report = shorthorizon(dir.path(), &["evaluate", "--generated", csv_arg]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["swd"].as_f64().unwrap() > 0.0);
    assert!(report["max_swd"].as_f64().unwrap() >= report["swd"].as_f64().unwrap());
}

#[test]
fn diagnose_bound_prints_terms() {
    let dir = tempfile::tempdir().unwrap();
    let out = shorthorizon(dir.path(), &["diagnose-bound", "--sigma-t", "3"]);
    let bound: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(bound["sigma_t"], 3.0);
    assert!(bound["e_init"]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[target]\ndimension = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shorthorizon"))
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}
