use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mzphase"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn workspace(config: Value) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();
    dir
}

fn worst_diagonal(text: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with("worst diagonal weight")).expect("worst diagonal reported");
    line.split_whitespace().nth(3).unwrap().parse().unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_owned()).collect()
}

#[test]
fn ideal_calibration_reports_unit_diagonals() {
    let dir = workspace(json!({
        "noise": {"preset": "ideal"},
        "plan": {"calibration_pulses": 50000, "grid_points": 513, "seed": 3}
    }));
    let out = run(dir.path(), &["--config", "run.json", "calibrate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for line in text.lines().filter(|l| l.starts_with("W(")) {
        let w: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(w > 0.99, "{line}");
    }
    assert!(worst_diagonal(&text) > 0.8);
    for name in ["weights.json", "fitted_confusion.json", "calibration_histograms.csv", "calibrate_manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn reference_calibration_reports_the_worst_diagonal() {
    let dir = workspace(json!({
        "noise": {"preset": "reference"},
        "plan": {"calibration_pulses": 100000, "grid_points": 513, "seed": 4},
        "output": {"dir": "cal"}
    }));
    let out = run(dir.path(), &["--config", "run.json", "calibrate"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!((worst_diagonal(&text) - 0.547).abs() < 0.03, "{text}");
    assert!(text.contains("at (0,0)"));

    // the fitted table drives a later scan
    let config = json!({
        "noise": {"preset": "reference", "weights": "cal/weights.json"},
        "plan": {"theta": [0.5], "replicas": 4, "shots": 200, "grid_points": 513}
    });
    fs::write(dir.path().join("scan.json"), config.to_string()).unwrap();
    let out = run(dir.path(), &["--config", "scan.json", "--out-dir", "scan", "scan", "--kind", "bias"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!((worst_diagonal(&stdout(&out)) - worst_diagonal(&text)).abs() < 1e-4);
}

#[test]
fn missing_config_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--config", "absent.json", "--out-dir", "out", "calibrate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
    let out = run(dir.path(), &["calibrate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configs_are_rejected() {
    for config in [
        json!({"plan": {"d_theta": 0.0}}),
        json!({"plan": {"theta": [1.5]}}),
        json!({"plan": {"shots": 0}}),
        json!({"model": {"nbar": -1.0}}),
        json!({"noise": {"preset": "reference", "file": "k.json"}}),
        json!({"noise": {"weights": "w.json"}}),
        json!({"plan": {"unknown": 1}}),
    ] {
        let dir = workspace(config.clone());
        let out = run(dir.path(), &["--config", "run.json", "fisher"]);
        assert_eq!(out.status.code(), Some(2), "{config}");
        assert!(!dir.path().join("fisher.csv").exists());
    }
    let dir = workspace(json!({}));
    assert_eq!(run(dir.path(), &["--config", "run.json", "scan", "--kind", "width"]).status.code(), Some(2));
}

#[test]
fn ideal_sensitivity_scan_sits_on_the_shot_noise_line() {
    let dir = workspace(json!({
        "plan": {"theta": [0.25, 0.5, 0.75], "replicas": 30, "seed": 8}
    }));
    let out = run(dir.path(), &["--config", "run.json", "scan", "--kind", "sensitivity"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("θ = ")).count(), 3);
    assert!(text.contains("max |bias|/σ_est"));
    let csv = fs::read_to_string(dir.path().join("scan_sensitivity.csv")).unwrap();
    for dt in column(&csv, "mean_dtheta") {
        let scaled = dt.parse::<f64>().unwrap() * 1000f64.sqrt();
        assert!((scaled - 1.0 / 1.08f64.sqrt()).abs() < 0.02, "{scaled}");
    }
    let reference = fs::read_to_string(dir.path().join("reference.csv")).unwrap();
    assert_eq!(reference.lines().next().unwrap(), "theta,crlb_ideal,crlb_fit,classical");
}

#[test]
fn bias_scan_reports_the_largest_bias() {
    let dir = workspace(json!({
        "plan": {"theta": [0.3], "replicas": 10, "estimators": ["bayes", "classical"]}
    }));
    let out = run(dir.path(), &["--config", "run.json", "scan", "--kind", "bias"]);
    assert!(out.status.success());
    assert!(stdout(&out).lines().any(|l| l.starts_with("max |bias|/σ_est = ")));
    let csv = fs::read_to_string(dir.path().join("scan_bias.csv")).unwrap();
    assert_eq!(column(&csv, "estimator"), ["bayes", "classical"]);
}

#[test]
fn fisher_curves() {
    let dir = workspace(json!({"model": {"nbar": 1.08}}));
    let out = run(dir.path(), &["--config", "run.json", "--quiet", "fisher"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let csv = fs::read_to_string(dir.path().join("fisher.csv")).unwrap();
    let f = column(&csv, "fisher");
    assert_eq!(f.len(), 19);
    for v in f {
        assert!((v.parse::<f64>().unwrap() - 1.08).abs() < 1e-6);
    }

    let dir = workspace(json!({"noise": {"preset": "reference"}, "plan": {"theta": [0.02, 0.5, 0.98]}}));
    assert!(run(dir.path(), &["--config", "run.json", "fisher"]).status.success());
    let csv = fs::read_to_string(dir.path().join("fisher.csv")).unwrap();
    let f: Vec<f64> = column(&csv, "fisher").iter().map(|v| v.parse().unwrap()).collect();
    assert!(f.iter().all(|v| *v > 0.0 && v.is_finite()));
    assert!(f[0] < f[1] && f[2] < f[1], "{f:?}");

    let dir = workspace(json!({"plan": {"theta": [0.0]}}));
    assert_eq!(run(dir.path(), &["--config", "run.json", "fisher"]).status.code(), Some(2));
}

#[test]
fn posterior_progression_files() {
    let dir = workspace(json!({"plan": {"checkpoints": [1, 100], "grid_points": 257}}));
    let out = run(dir.path(), &["--config", "run.json", "posterior"]);
    assert!(out.status.success());
    for name in ["posterior_p1.csv", "posterior_p100.csv", "posterior_manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let csv = fs::read_to_string(dir.path().join("posterior_p100.csv")).unwrap();
    assert_eq!(csv.lines().count(), 258);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let dir = workspace(json!({
        "noise": {"preset": "reference"},
        "plan": {"theta": [0.2, 0.6], "replicas": 6, "shots": 300, "calibration_pulses": 20000, "grid_points": 513,
                 "estimators": ["bayes", "ml", "ymk"]}
    }));
    let args = |out: &'static str| ["--config", "run.json", "--seed", "42", "--out-dir", out, "scan", "--kind", "sensitivity"];
    assert!(run(dir.path(), &args("a")).status.success());
    assert!(run(dir.path(), &args("b")).status.success());
    let a = snapshot(&dir.path().join("a"));
    assert_eq!(a, snapshot(&dir.path().join("b")));

    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("a/scan_sensitivity_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["config"]["plan"]["seed"], 42);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));

    let out = run(dir.path(), &["--config", "run.json", "--seed", "43", "--out-dir", "c", "scan", "--kind", "sensitivity"]);
    assert!(out.status.success());
    assert_ne!(fs::read(dir.path().join("a/scan_sensitivity.csv")).unwrap(), fs::read(dir.path().join("c/scan_sensitivity.csv")).unwrap());
}

#[test]
fn rank_deficient_calibration_is_a_numerical_failure() {
    let dir = workspace(json!({
        "noise": {"calibration": [{"theta": 0.2, "file": "a.csv"}, {"theta": 0.7, "file": "b.csv"}]},
        "output": {"dir": "out"}
    }));
    let pulses = "pulse_index,nc,nd\n0,1,0\n1,0,0\n2,0,1\n3,2,0\n";
    fs::write(dir.path().join("a.csv"), pulses).unwrap();
    fs::write(dir.path().join("b.csv"), pulses).unwrap();
    let out = run(dir.path(), &["--config", "run.json", "calibrate"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn recorded_calibration_runs_are_fitted() {
    // three phases, the fewest the fit accepts for counts up to 1
    let dir = workspace(json!({
        "noise": {"n_max": 1, "calibration": [
            {"theta": 0.0, "file": "p0.csv"},
            {"theta": 0.5, "file": "p1.csv"},
            {"theta": 1.0, "file": "p2.csv"}
        ]},
        "plan": {"grid_points": 257}
    }));
    let write = |name: &str, pairs: &[(u32, u32, usize)]| {
        let mut text = String::from("pulse_index,nc,nd\n");
        let mut i = 0;
        for &(a, b, n) in pairs {
            for _ in 0..n {
                text.push_str(&format!("{i},{a},{b}\n"));
                i += 1;
            }
        }
        fs::write(dir.path().join(name), text).unwrap();
    };
    write("p0.csv", &[(0, 0, 340), (1, 0, 660)]);
    write("p1.csv", &[(0, 0, 340), (1, 0, 180), (0, 1, 180), (1, 1, 300)]);
    write("p2.csv", &[(0, 0, 340), (0, 1, 660)]);
    let out = run(dir.path(), &["--config", "run.json", "calibrate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights: Value = serde_json::from_slice(&fs::read(dir.path().join("weights.json")).unwrap()).unwrap();
    assert_eq!(weights["weights"].as_object().unwrap().len(), 4);
}
