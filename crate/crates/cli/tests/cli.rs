use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use modal_dynamics::sampler::PolePolicy;
use modal_dynamics::scenario::{builtin, CurrentKind};

fn modal_dyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modal-dyn"))
        .args(args)
        .env_remove("MODAL_DYN_OUT")
        .output()
        .expect("binary runs")
}

fn write_scenario(dir: &Path, name: &str, edit: impl FnOnce(&mut modal_dynamics::scenario::Scenario)) -> String {
    let mut s = builtin("easyexample").unwrap();
    s.ensemble.paths = 500;
    edit(&mut s);
    let path = dir.join(name);
    fs::write(&path, s.to_canonical_json()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn lists_builtins() {
    let out = modal_dyn(&["list-builtins"]);
    assert!(out.status.success());
    let names = String::from_utf8(out.stdout).unwrap();
    assert!(names.lines().count() >= 5);
    assert!(names.lines().any(|l| l == "singlet"));
}

#[test]
fn validate_reports_bad_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"name\": \"x\",\n \"factor_dims\": [2, 2],\n oops}").unwrap();
    let out = modal_dyn(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let missing = modal_dyn(&["validate", "/nonexistent/scenario.json"]);
    assert_eq!(missing.status.code(), Some(2));

    let good = write_scenario(dir.path(), "good.json", |_| {});
    assert!(modal_dyn(&["validate", &good]).status.success());
}

#[test]
fn unnormalized_state_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "s.json", |s| s.initial_state[0] = [2.0, 0.0]);
    let out = modal_dyn(&["run", &file, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalized"));
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = modal_dyn(&["run", "singlet", "--paths", "3000", "--seed", "11", "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 10);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["paths"], 3000);
    assert_eq!(manifest["scenario_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn report_only_and_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_modal-dyn"))
        .args(["run", "albert-free", "--paths", "200", "--report-only"])
        .env("MODAL_DYN_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> =
        fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["manifest.json", "report.json", "scenario.json"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ensemble"]["deterministic"], true);
}

#[test]
fn diagnostic_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "s.json", |s| s.thresholds.continuity = 1e-30);
    let out = modal_dyn(&["run", &file, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("o/report.json").exists());
}

#[test]
fn pole_abort_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "s.json", |s| {
        s.current = CurrentKind::MinimalFlow;
        s.pole_policy = PolePolicy::Abort;
    });
    let out = modal_dyn(&["run", &file, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn current_flag_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let out = modal_dyn(&[
        "run",
        "easyexample",
        "--paths",
        "500",
        "--current",
        "static_schrodinger",
        "--report-only",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["current"], "static_schrodinger");
    assert_eq!(modal_dyn(&["run", "easyexample", "--current", "bogus"]).status.code(), Some(2));
}
