use std::path::Path;
use std::process::{Command, Output};

fn dualdec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualdec"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn solve_substitutes_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&dualdec(&["solve", "--eq", "x+y=N_1;x-y=N_2", "--nums", "27,3"], dir.path()));
    assert!(out.contains("x+y=27;x-y=3"), "{out}");
    assert!(out.contains("x=15, y=12"), "{out}");
}

#[test]
fn solve_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualdec(&["solve", "--eq", "x+="], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn solve_rejects_missing_slot() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualdec(&["solve", "--eq", "x=N_3", "--nums", "4"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = stdout(&dualdec(&["gen", "--n", "12", "--seed", "5", "--templates", "sum_diff,linear", "--out", "p.jsonl"], d));
    assert!(out.contains("12 problems"));
    let lines = std::fs::read_to_string(d.join("p.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);

    let out = stdout(&dualdec(&["preprocess", "--in", "p.jsonl", "--out", "pp.jsonl"], d));
    assert!(out.contains("0 unalignable"), "{out}");

    std::fs::write(d.join("cfg.json"), r#"{"eval_every": 0, "model": {"layers": 1}}"#).unwrap();
    stdout(&dualdec(
        &["train", "--data", "pp.jsonl", "--config", "cfg.json", "--epochs", "1", "--lr", "1e-3", "--out", "m.json"],
        d,
    ));
    assert!(d.join("m.json").exists());
    assert!(d.join("m.json.metrics.jsonl").exists());

    stdout(&dualdec(
        &["rl", "--data", "pp.jsonl", "--ckpt", "m.json", "--lr", "1e-5", "--beam", "2", "--out", "m2.json"],
        d,
    ));
    let out = stdout(&dualdec(
        &["eval", "--data", "pp.jsonl", "--ckpt", "m2.json", "--beam", "2", "--folds", "3", "--seed", "1"],
        d,
    ));
    assert_eq!(out.lines().filter(|l| l.starts_with("fold")).count(), 3);
    assert!(out.lines().any(|l| l.starts_with("all") && l.contains("n=12")), "{out}");
}

#[test]
fn unknown_template_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualdec(&["gen", "--n", "2", "--templates", "nope", "--out", "x.jsonl"], dir.path());
    assert!(!o.status.success());
}
