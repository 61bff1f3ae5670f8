use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn flowcheck(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcheck"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Workspace with a training set and a separate calibration set.
fn workspace(n: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    for (seed, name) in [("1", "train.csv"), ("2", "cal.csv")] {
        let out = flowcheck(
            dir.path(),
            &["simulate", "--task", "gaussian-linear", "--n", n, "--seed", seed, "--out", name],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    dir
}

#[test]
fn oracle_is_accepted_and_bundle_is_written() {
    let ws = workspace("2000");
    let out = flowcheck(
        ws.path(),
        &["diagnose-global", "--data", "cal.csv", "--oracle", "--out", "run", "--sbc-draws", "20"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("ACCEPT"));
    let global = ws.path().join("run/global");
    for f in ["summary.json", "pit.csv", "ppplot_pit_1.csv", "ppplot_pit_2.csv"] {
        assert!(global.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(global.join("ppplot_pit_1.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("alpha,r_hat,band_lo,band_hi"));
    assert_eq!(csv.lines().count(), 101);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(global.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["global"]["decision"], "ACCEPT");
    assert_eq!(summary["global"]["replicates"], 999);
    assert!(summary["sbc"]["p_adjusted"].is_array());
}

#[test]
fn injected_dispersion_exits_one() {
    let ws = workspace("3000");
    let out = flowcheck(
        ws.path(),
        &["diagnose-global", "--data", "cal.csv", "--oracle", "--inject", "dispersion:1.5", "--out", "run", "--sbc-draws", "0"],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("REJECT global uniformity for covariates 1, 2"));
}

#[test]
fn global_runs_are_deterministic() {
    let ws = workspace("1000");
    let args = |dir| ["diagnose-global", "--data", "cal.csv", "--oracle", "--out", dir, "--seed", "7", "--sbc-draws", "20"];
    assert_eq!(code(&flowcheck(ws.path(), &args("a"))), 0);
    assert_eq!(code(&flowcheck(ws.path(), &args("b"))), 0);
    let a = std::fs::read(ws.path().join("a/global/summary.json")).unwrap();
    let b = std::fs::read(ws.path().join("b/global/summary.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_two() {
    let ws = workspace("500");
    let p = ws.path();
    // missing required flag
    assert_eq!(code(&flowcheck(p, &["simulate", "--n", "10", "--out", "x.csv"])), 2);
    // missing input file
    let out = flowcheck(p, &["diagnose-global", "--data", "absent.csv", "--oracle", "--out", "run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.csv"));
    // neither flow nor oracle
    assert_eq!(code(&flowcheck(p, &["diagnose-global", "--data", "cal.csv", "--out", "run"])), 2);
    // unknown task and bad injection
    assert_eq!(code(&flowcheck(p, &["simulate", "--task", "lorenz", "--n", "5", "--out", "x.csv"])), 2);
    let out = flowcheck(p, &["diagnose-global", "--data", "cal.csv", "--oracle", "--inject", "dispersion:-1", "--out", "run"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn replicate_count_too_small_for_level() {
    let ws = workspace("500");
    // 1/(B+1) = 0.01 exceeds level/m = 0.0075
    let out = flowcheck(
        ws.path(),
        &["diagnose-global", "--data", "cal.csv", "--oracle", "--out", "run", "--replicates", "99", "--level", "0.015"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("configuration error"), "{}", stderr(&out));
    let out = flowcheck(
        ws.path(),
        &["diagnose-global", "--data", "cal.csv", "--oracle", "--out", "run", "--replicates", "50"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn training_data_is_refused_for_calibration() {
    let ws = workspace("1500");
    let p = ws.path();
    let out = flowcheck(p, &["train", "--data", "train.csv", "--out", "flow.json", "--epochs", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(p.join("flow.json").is_file());
    // same file passed twice
    let out = flowcheck(
        p,
        &["diagnose-global", "--data", "train.csv", "--flow", "flow.json", "--train-data", "train.csv", "--out", "run"],
    );
    assert_eq!(code(&out), 2);
    // the flow remembers what it was trained on
    let out = flowcheck(p, &["diagnose-global", "--data", "train.csv", "--flow", "flow.json", "--out", "run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("leakage"), "{}", stderr(&out));
    let out = flowcheck(
        p,
        &["diagnose-global", "--data", "cal.csv", "--flow", "flow.json", "--train-data", "train.csv", "--out", "run", "--sbc-draws", "0"],
    );
    assert!(matches!(code(&out), 0 | 1), "{}", stderr(&out));
}

#[test]
fn local_needs_global_first_unless_forced() {
    let ws = workspace("1500");
    let p = ws.path();
    std::fs::write(p.join("points.csv"), "x_1,x_2,x_3\n1.5,0,0\n-1.5,0.5,0\n").unwrap();
    let local = ["diagnose-local", "--data", "cal.csv", "--oracle", "--out", "run", "--points", "points.csv", "--grid", "9"];
    let out = flowcheck(p, &local);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("diagnose-global"));

    let mut forced = local.to_vec();
    forced.push("--force");
    let out = flowcheck(p, &forced);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = p.join("run/local");
    assert!(dir.join("summary.json").is_file());
    assert!(dir.join("point_2_pit_2.csv").is_file());
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["replicates"], 99);
}

#[test]
fn local_point_dimension_is_checked() {
    let ws = workspace("500");
    let p = ws.path();
    std::fs::write(p.join("points.csv"), "x_1,x_2\n1,0\n").unwrap();
    let out = flowcheck(
        p,
        &["diagnose-local", "--data", "cal.csv", "--oracle", "--out", "run", "--points", "points.csv", "--force"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("expected d = 3"), "{}", stderr(&out));
}

#[test]
fn gain_sweep_writes_curve_file() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let sim = ["simulate", "--task", "gain-toy", "--n", "800", "--seed", "3", "--out", "g.bin", "--binary"];
    assert_eq!(code(&flowcheck(p, &sim)), 0);
    let out = flowcheck(
        p,
        &[
            "diagnose-local", "--data", "g.bin", "--oracle", "--task", "gain-toy", "--sweep", "gain:-20:20:5",
            "--replicates", "0", "--grid", "5", "--out", "run", "--force",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(p.join("run/local/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "g,T_1,T_2,p_1,p_2,padj_1,padj_2");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("-20,"));

    // a sweep needs the gain task
    let out = flowcheck(
        p,
        &["diagnose-local", "--data", "g.bin", "--oracle", "--sweep", "gain:-20:20:5", "--out", "run", "--force"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn independence_report() {
    let ws = workspace("2000");
    let p = ws.path();
    std::fs::write(p.join("points.csv"), "x_1,x_2,x_3\n0,0,0\n").unwrap();
    let out = flowcheck(
        p,
        &["independence", "--data", "cal.csv", "--oracle", "--out", "run", "--points", "points.csv", "--replicates", "199"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("necessary condition"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("run/independence.json")).unwrap()).unwrap();
    assert_eq!(report["local"].as_array().unwrap().len(), 1);
    assert_eq!(report["global"]["replicates"], 199);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let ws = workspace("500");
    let p = ws.path();
    std::fs::write(p.join("cfg.json"), r#"{"replicates": 50}"#).unwrap();
    let base = ["--config", "cfg.json", "diagnose-global", "--data", "cal.csv", "--oracle", "--out", "run", "--sbc-draws", "0"];
    // 50 replicates from the file is too few
    assert_eq!(code(&flowcheck(p, &base)), 2);
    let mut with_flag = base.to_vec();
    with_flag.extend(["--replicates", "199"]);
    assert_eq!(code(&flowcheck(p, &with_flag)), 0);

    std::fs::write(p.join("bad.json"), r#"{"replikates": 50}"#).unwrap();
    let out = flowcheck(p, &["--config", "bad.json", "simulate", "--task", "gain-toy", "--n", "5", "--out", "g.csv"]);
    assert_eq!(code(&out), 2);
}
