use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "data": {"type": "synth", "synth": {"n_rows": 1500, "n_features": 5, "n_weeks": 20}},
  "split": {"cut_week": 13, "val_weeks": 4},
  "bnn": {"hidden": [8], "epochs": 3, "predict_samples": 5},
  "gbdt": {"n_rounds": 10},
  "explain_top_k": 3,
  "seed": 3
}"#;

fn riskfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_score_explain_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let out = dir.path().join("run");
    let o = riskfuse(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("fused_calibrated"));
    for f in [
        "report.json",
        "scores.csv",
        "explanations.json",
        "models/bnn.json",
        "models/gbdt.json",
        "models/temperature.json",
        "data/base.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let rescored = dir.path().join("rescored.csv");
    let o = riskfuse(&[
        "score",
        "--model-dir",
        s(&out),
        "--input",
        s(&out.join("data/base.csv")),
        "--aux",
        s(&out.join("data/prev_0.csv")),
        "--out",
        s(&rescored),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(&rescored).unwrap(),
        fs::read_to_string(out.join("scores.csv")).unwrap()
    );

    let first_case = fs::read_to_string(out.join("scores.csv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let o = riskfuse(&[
        "explain",
        "--model-dir",
        s(&out),
        "--input",
        s(&out.join("data/base.csv")),
        "--aux",
        s(&out.join("data/prev_0.csv")),
        "--case-id",
        &first_case,
        "--k",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["contributions"].as_array().unwrap().len(), 2);

    let o = riskfuse(&["report", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(out.join("aggregate.json").exists());
}

#[test]
fn same_seed_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(riskfuse(&["run", "--config", s(&cfg), "--out", s(out)])
            .status
            .success());
    }
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn synth_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let out = dir.path().join("tables");
    let o = riskfuse(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let base = fs::read_to_string(out.join("base.csv")).unwrap();
    assert_eq!(base.lines().count(), 1501);
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"split": {"cut_week": 3, "val_weeks": 5}}"#);
    let o = riskfuse(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out/report.json").exists());

    let cfg = write_config(dir.path(), r#"{"no_such_field": 1}"#);
    let o = riskfuse(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreadable_input_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = riskfuse(&[
        "score",
        "--model-dir",
        s(dir.path()),
        "--input",
        s(&dir.path().join("missing.csv")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}
