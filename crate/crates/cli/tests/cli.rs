use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dfalab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfalab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

const RUN: &str = "mode = dfa_blockwise
n_layer = 2
d_model = 16
n_head = 2
context = 16
batch_size = 2
total_tokens = 640
log_interval = 4
alignment_interval = 5
lr = 3e-3
";

fn prepare(dir: &Path) {
    let synth = stdout_json(&dfalab(&["synth", "--bytes", "20000", "--seed", "3", "--out", "text.txt"], dir));
    assert_eq!(synth["bytes"], 20000);
    let ing = stdout_json(&dfalab(&["ingest", "text.txt", "--out", "corpus.bin"], dir));
    assert_eq!(ing["tokens"], 20000);
    fs::write(dir.join("run.cfg"), RUN).unwrap();
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let s = stdout_json(&dfalab(
        &["train", "--config", "run.cfg", "--corpus", "corpus.bin", "--out", "logs", "--save-model", "m.ckpt"],
        d,
    ));
    assert_eq!(s["run"], "dfa_blockwise_2x16_0");
    assert!(s["final_loss"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(d.join("logs/dfa_blockwise_2x16_0.csv")).unwrap();
    assert!(csv.starts_with("step,tokens,loss,flop_standard,flop_optimistic,flop_exact\n"));
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(d.join("logs/dfa_blockwise_2x16_0_alignment.csv").exists());
    assert!(d.join("m.ckpt").exists());

    fs::write(d.join("bp.cfg"), RUN.replace("dfa_blockwise", "bp")).unwrap();
    stdout_json(&dfalab(&["train", "--config", "bp.cfg", "--corpus", "corpus.bin", "--out", "logs"], d));
    let r = stdout_json(&dfalab(
        &["report", "--logs", "logs", "--out", "out/report.json", "--plot", "plots"],
        d,
    ));
    let methods = r["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    assert!(methods[0]["scenario"].is_null());
    assert!(methods[1]["alpha_C"].is_number());
    let on_disk: Value = serde_json::from_str(&fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, r);
    assert!(d.join("plots/bp.csv").exists());
    assert!(d.join("plots/dfa_blockwise.csv").exists());
}

#[test]
fn sweep_writes_runs_and_best() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    fs::write(d.join("grid.cfg"), RUN.replace("lr = 3e-3", "lr = 1e-3, 3e-3").replace("dfa_blockwise", "bp, shallow")).unwrap();
    let s = stdout_json(&dfalab(&["sweep", "--grid", "grid.cfg", "--corpus", "corpus.bin", "--out", "sw"], d));
    assert_eq!(s["runs"].as_array().unwrap().len(), 4);
    assert_eq!(s["best"].as_array().unwrap().len(), 2);
    assert!(d.join("sw/best/bp_2x16_0.csv").exists());
    assert!(d.join("sw/best/shallow_2x16_0.csv").exists());
    assert!(d.join("sw/runs/bp_2x16_0_lr1e-3.csv").exists());
    let again = stdout_json(&dfalab(&["sweep", "--grid", "grid.cfg", "--corpus", "corpus.bin", "--out", "sw2", "--sequential"], d));
    assert_eq!(again, s);
    assert_eq!(
        fs::read(d.join("sw/runs/shallow_2x16_0_lr3e-3.csv")).unwrap(),
        fs::read(d.join("sw2/runs/shallow_2x16_0_lr3e-3.csv")).unwrap()
    );
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let e = stderr_json(&dfalab(&["ingest", "missing.txt", "--out", "c.bin"], d));
    assert_eq!(e["error"], "io");

    fs::write(d.join("empty.txt"), "").unwrap();
    let e = stderr_json(&dfalab(&["ingest", "empty.txt", "--out", "c.bin"], d));
    assert_eq!(e["error"], "validation");

    fs::write(d.join("bad.cfg"), "mode = backprop\n").unwrap();
    let e = stderr_json(&dfalab(&["train", "--config", "bad.cfg", "--corpus", "c.bin", "--out", "l"], d));
    assert!(e["message"].as_str().unwrap().contains("backprop"));

    let out = dfalab(&["train", "--bogus"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");

    let e = stderr_json(&dfalab(&["report", "--logs", ".", "--out", "r.json"], d));
    assert_eq!(e["error"], "validation");
}

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&dfalab(&["check"], dir.path()));
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() >= 10);
}
