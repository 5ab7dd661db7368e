use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rbl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbl"))
        .args(args)
        .env_remove("RBL_WORKERS")
        .output()
        .expect("binary runs")
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// The shipped range config cut down to a few trials.
fn small_config(dir: &Path, trials: usize) -> PathBuf {
    let text = fs::read_to_string(config_path("range_square.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["trials"] = trials.into();
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5);
    let out = dir.path().join("out");
    let o = rbl(&["run", s(&cfg), "--out", s(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trials = fs::read_to_string(out.join("trials.csv")).unwrap();
    let mut lines = trials.lines();
    assert_eq!(
        lines.next().unwrap(),
        "estimator,sigma,trial,angle_err,trans_err,node_rmse,objective,converged,wall_s"
    );
    // 2 estimators x 3 sigma levels x 5 trials
    assert_eq!(lines.count(), 30);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cells"].as_array().unwrap().len(), 6);
    for name in ["point_ls", "rbl"] {
        let plot = fs::read_to_string(out.join("plotdata").join(format!("{name}.csv"))).unwrap();
        assert_eq!(plot.lines().count(), 1 + 3);
    }
}

#[test]
fn output_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 8);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(rbl(&["run", s(&cfg), "--out", s(&a), "--workers", "1"])
        .status
        .success());
    let o = Command::new(env!("CARGO_BIN_EXE_rbl"))
        .args(["run", s(&cfg), "--out", s(&b)])
        .env("RBL_WORKERS", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["trials.csv", "summary.json", "plotdata/rbl.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(rbl(&["run", s(&cfg), "--out", s(&a), "--seed", "1"])
        .status
        .success());
    assert!(rbl(&["run", s(&cfg), "--out", s(&b), "--seed", "2"])
        .status
        .success());
    assert_ne!(
        fs::read(a.join("trials.csv")).unwrap(),
        fs::read(b.join("trials.csv")).unwrap()
    );
}

#[test]
fn validate_reports_every_problem_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = fs::read_to_string(config_path("range_square.json"))
        .unwrap()
        .replace("\"trials\": 500", "\"trials\": 0")
        .replace("\"rbl\"]", "\"nope\"]");
    fs::write(&path, text).unwrap();
    let o = rbl(&["validate", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trials") && err.contains("nope"), "{err}");
}

#[test]
fn shipped_configs_validate() {
    for name in ["range_square.json", "truck.json", "rssi_gpr.json"] {
        let o = rbl(&["validate", s(&config_path(name))]);
        assert!(
            o.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn io_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(rbl(&["validate", s(&missing)]).status.code(), Some(1));

    let cfg = small_config(dir.path(), 1);
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = rbl(&["run", s(&cfg), "--out", s(&blocker.join("out"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn crlb_prints_bounds() {
    let o = rbl(&["crlb", s(&config_path("range_square.json"))]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let t0 = rows[0]["translation"].as_f64().unwrap();
    let t1 = rows[1]["translation"].as_f64().unwrap();
    // bound scales linearly with σ
    assert!((t1 / t0 - 10.0).abs() < 1e-9);
}
