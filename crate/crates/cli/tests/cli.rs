use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_varband"))
}

fn spec_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/four_regime.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("VARBAND_LOG").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// simulate -> estimate -> frontier, returning the produced paths.
fn pipeline(dir: &Path) -> [PathBuf; 4] {
    let returns = dir.join("returns.csv");
    let params = dir.join("params.json");
    let frontier = dir.join("frontier.csv");
    let diag = dir.join("frontier.diagnostics.json");
    ok(&["simulate", "--spec", s(&spec_path()), "--out", s(&returns)]);
    ok(&["estimate", "--returns", s(&returns), "--n1", "125", "--n2", "25", "--out", s(&params)]);
    ok(&["frontier", "--params", s(&params), "--grid", "21", "--out", s(&frontier)]);
    [returns, params, frontier, diag]
}

#[test]
fn simulate_estimate_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let [returns, params, frontier, diag] = pipeline(dir.path());

    let text = fs::read_to_string(&returns).unwrap();
    assert!(text.starts_with("date,A1,A2,A3,A4\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 250);

    let p: serde_json::Value = serde_json::from_str(&fs::read_to_string(&params).unwrap()).unwrap();
    assert_eq!(p["schema"], "varband.params/1");
    assert_eq!(p["assets"].as_array().unwrap().len(), 4);

    let csv = fs::read_to_string(&frontier).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "w,sigma2_lower,sigma2_upper,objective,beta_1,beta_2,beta_3,beta_4"
    );
    assert_eq!(lines.count(), 21);

    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(&diag).unwrap()).unwrap();
    assert_eq!(d["points"], 21);
    assert_eq!(d["dominance_violations"].as_array().unwrap().len(), 0);
    assert!(d["max_kkt_residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = pipeline(a.path());
    let pb = pipeline(b.path());
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn seed_flag_overrides_spec() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    ok(&["simulate", "--spec", s(&spec_path()), "--out", s(&x)]);
    ok(&["simulate", "--spec", s(&spec_path()), "--seed", "7", "--out", s(&y)]);
    assert_ne!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let [returns, params, ..] = pipeline(dir.path());
    let before = (fs::read(&returns).unwrap(), fs::read(&params).unwrap());
    let sol = dir.path().join("solution.json");
    ok(&["optimize", "--params", s(&params), "--w", "0.5", "--out", s(&sol)]);
    ok(&[
        "backtest", "--returns", s(&returns), "--window", "252", "--horizon", "20", "--w", "0,1",
        "--baseline", "--out", s(&dir.path().join("bt.json")),
    ]);
    assert_eq!(before, (fs::read(&returns).unwrap(), fs::read(&params).unwrap()));

    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sol).unwrap()).unwrap();
    let beta: f64 = v["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).sum();
    assert!((beta - 1.0).abs() < 1e-9);
    assert_eq!(v["solver"], "active_set");
}

#[test]
fn backtest_writes_table_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let returns = dir.path().join("r.csv");
    ok(&["simulate", "--spec", s(&spec_path()), "--out", s(&returns)]);
    let (out, table, paths) = (
        dir.path().join("bt.json"),
        dir.path().join("table.csv"),
        dir.path().join("wealth.csv"),
    );
    ok(&[
        "backtest", "--returns", s(&returns), "--window", "252", "--horizon", "30", "--w", "0.25,0.75",
        "--r0", "0.0003", "--baseline", "--out", s(&out), "--table", s(&table), "--emit-paths", s(&paths),
    ]);
    let t = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = t.lines().collect();
    assert_eq!(rows[0], "w,sle_cw,sle_sr,sle_md,mv_cw,mv_sr,mv_md");
    assert_eq!(rows.len(), 3);
    let wealth = fs::read_to_string(&paths).unwrap();
    assert!(wealth.starts_with("date,wealth_sle_w0.25,wealth_sle_w0.75,wealth_mv\n"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["schema"], "varband.backtest/1");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["frontier", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn w_out_of_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("never.json");
    let out = run(&["optimize", "--params", "p.json", "--w", "1.5", "--out", s(&target)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("w must lie in [0,1]"));
    assert!(!target.exists());

    let out = run(&["backtest", "--returns", "r.csv", "--w", "0.5,-0.1", "--out", s(&target)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn returns_and_prices_are_exclusive() {
    let out = run(&["estimate", "--returns", "a.csv", "--prices", "b.csv", "--out", "p.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_print_one_tagged_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["optimize", "--params", s(&missing), "--w", "0.5", "--out", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]:"), "{err}");

    let params = dir.path().join("bad.json");
    fs::write(&params, "{ not json").unwrap();
    let out = run(&["frontier", "--params", s(&params), "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("f.csv").exists());
}

#[test]
fn infeasible_target_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let [_, params, ..] = pipeline(dir.path());
    let out = run(&["optimize", "--params", s(&params), "--w", "0.5", "--r0", "1.0", "--out", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[optimizer]:"), "{err}");
}
