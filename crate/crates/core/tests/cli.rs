//! End-to-end runs of the `ndeepc` binary on the small smoke configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neural_deepc::harness::ClosedLoopLog;
use serde_json::Value;

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn ndeepc(sub: &str, config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndeepc"))
        .args([sub, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(sub: &str, config: &Path, out: &Path) -> String {
    let o = ndeepc(sub, config, out);
    assert!(
        o.status.success(),
        "{sub} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn error_category(o: &Output) -> String {
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("one error line");
    let rest = line.strip_prefix("error: category=").unwrap_or_else(|| panic!("unexpected: {line}"));
    rest.split_whitespace().next().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The smoke config with extra TOML appended, written into `dir`.
fn variant(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("variant.toml");
    let base = std::fs::read_to_string(smoke_config()).unwrap();
    std::fs::write(&path, format!("{base}\n{extra}\n")).unwrap();
    path
}

#[test]
fn full_pipeline_writes_manifest_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = smoke_config();

    let summary = ok("generate", &cfg, out);
    assert!(summary.contains("samples: 400"), "{summary}");
    let rows = std::fs::read_to_string(out.join("data.csv")).unwrap().lines().count();
    assert_eq!(rows, 401);

    ok("train", &cfg, out);
    let cert = json(&out.join("certificate.json"));
    assert_eq!(cert["phi_bar_shape"], serde_json::json!([30, 390]));
    assert_eq!(cert["hankel_shape"], serde_json::json!([20, 390]));
    assert!(cert["refit_cost_after"].as_f64().unwrap() <= cert["refit_cost_before"].as_f64().unwrap());

    ok("certify", &cfg, out);
    ok("simulate", &cfg, out);
    let log = ClosedLoopLog::read_csv(&out.join("closed_loop_p3.csv")).unwrap();
    assert_eq!(log.len(), 120);
    let metrics = json(&out.join("metrics_p3.json"));

    let manifest = json(&out.join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    for file in [&cert, &metrics, &json(&out.join("generate_summary.json"))] {
        assert_eq!(file["config_hash"].as_str(), Some(hash));
    }
    let listed: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    for name in [
        "data.csv",
        "generate_summary.json",
        "loss.csv",
        "weights.json",
        "certificate.json",
        "closed_loop_p3.csv",
        "metrics_p3.json",
    ] {
        assert!(listed.contains(&name), "{name} missing from {listed:?}");
        assert!(out.join(name).exists());
    }
    // certify and train both write certificate.json; it is listed once
    assert_eq!(listed.iter().filter(|p| **p == "certificate.json").count(), 1);
}

#[test]
fn reruns_reproduce_files_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    for out in [a.path(), b.path()] {
        ok("generate", &cfg, out);
        ok("train", &cfg, out);
        ok("simulate", &cfg, out);
    }
    for name in ["data.csv", "loss.csv", "weights.json", "certificate.json", "manifest.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between reruns");
    }
    // solve times differ run to run; the trajectories must not
    let la = ClosedLoopLog::read_csv(&a.path().join("closed_loop_p3.csv")).unwrap();
    let lb = ClosedLoopLog::read_csv(&b.path().join("closed_loop_p3.csv")).unwrap();
    assert_eq!(la.u, lb.u);
    assert_eq!(la.y, lb.y);
}

#[test]
fn simulate_without_weights_is_a_clear_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ndeepc("simulate", &smoke_config(), dir.path());
    assert_eq!(error_category(&o), "io");
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `generate` first"));

    ok("generate", &smoke_config(), dir.path());
    let o = ndeepc("simulate", &smoke_config(), dir.path());
    assert_eq!(error_category(&o), "io");
    assert!(String::from_utf8_lossy(&o.stderr).contains("weights file"));
}

#[test]
fn invalid_configs_are_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let zero_range = variant(dir.path(), "");
    let text = std::fs::read_to_string(&zero_range)
        .unwrap()
        .replace("[excitation]", "[excitation]\nrange = [1.0, 1.0]");
    std::fs::write(&zero_range, text).unwrap();
    assert_eq!(error_category(&ndeepc("generate", &zero_range, &out)), "config");

    // 8 samples leave fewer columns than (m + p) T_ini + m N
    let short = variant(dir.path(), "");
    let text = std::fs::read_to_string(&short)
        .unwrap()
        .replace("period = 400", "period = 8");
    std::fs::write(&short, text).unwrap();
    assert_eq!(error_category(&ndeepc("generate", &short, &out)), "config");

    let missing = dir.path().join("nope.toml");
    assert_eq!(error_category(&ndeepc("train", &missing, &out)), "io");
    assert!(!out.exists());
}

#[test]
fn compare_mode_writes_three_row_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "[control]\nformulation = \"compare\"");
    let out = dir.path().join("out");
    ok("generate", &cfg, &out);
    ok("train", &cfg, &out);
    ok("simulate", &cfg, &out);
    let table = std::fs::read_to_string(out.join("comparison.txt")).unwrap();
    for label in ["p1", "p2", "p3"] {
        assert!(table.lines().any(|l| l.starts_with(label)), "{table}");
        assert!(out.join(format!("closed_loop_{label}.csv")).exists());
    }
    let report = json(&out.join("comparison.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn linear_architecture_certifies_on_the_hankel_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(smoke_config())
        .unwrap()
        .replace("widths = [30]\nactivations = [\"tanh\"]", "architecture = \"linear\"");
    let cfg = dir.path().join("linear.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    ok("generate", &cfg, &out);
    ok("train", &cfg, &out);
    let cert = json(&out.join("certificate.json"));
    assert_eq!(cert["phi_bar_shape"], cert["hankel_shape"]);
    assert!(!out.join("loss.csv").exists());
}
