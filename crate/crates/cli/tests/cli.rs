use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdraft")).args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"n_layers": 3, "n_draft_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 24, "block_slots": 4, "calib_hidden": 8}}"#,
    )
    .unwrap();
    let ckpt = dir.join("model.fxdr");
    let corpus = dir.join("corpus.txt");
    let cfg = cfg.to_str().unwrap();
    ok(&["init", "--config", cfg, "--seed", "3", "--out", ckpt.to_str().unwrap()]);
    ok(&["gen-corpus", "--vocab", "24", "--sequences", "20", "--seq-len", "16", "--out", corpus.to_str().unwrap()]);
    (ckpt.to_str().unwrap().to_owned(), corpus.to_str().unwrap().to_owned())
}

#[test]
fn greedy_decode_agrees_across_modes() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = setup(dir.path());
    let response = |mode: &str| {
        let lines = json_lines(&ok(&["decode", "--checkpoint", &ckpt, "--prompt", "1 2 3", "--mode", mode, "--max-tokens", "20"]));
        assert_eq!(lines[0]["kind"], "decode");
        lines.last().unwrap()["response"].clone()
    };
    let par = response("parallel");
    assert_eq!(par.as_array().unwrap().len(), 20);
    assert_eq!(par, response("sequential"));
}

#[test]
fn bench_auto_mode_follows_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, corpus) = setup(dir.path());
    let lines = json_lines(&ok(&[
        "bench", "--checkpoint", &ckpt, "--corpus", &corpus, "--batch", "1,2,3", "--max-tokens", "8",
    ]));
    let header = &lines[0];
    assert_eq!(header["kind"], "bench");
    assert_eq!(header["config_hash"].as_str().unwrap().len(), 16);
    let summaries: Vec<&Value> = lines.iter().filter(|l| l.get("est_speedup").is_some() && l.get("stream_id").is_none()).collect();
    let modes: Vec<&str> = summaries.iter().map(|s| s["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["parallel", "parallel", "sequential"]);
    let records = lines.iter().filter(|l| l.get("stream_id").is_some()).count();
    assert_eq!(records, 1 + 2 + 3);
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, corpus) = setup(dir.path());
    let out = dir.path().join("trained.fxdr");
    let lines = json_lines(&ok(&[
        "train", "--checkpoint", &ckpt, "--corpus", &corpus, "--steps", "3", "--batch", "2", "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(lines.len(), 3);
    assert!(lines[2]["acc@slot"].is_array());
    assert!(out.exists());
}

#[test]
fn same_seed_same_corpus_bytes() {
    let a = ok(&["gen-corpus", "--seed", "4", "--vocab", "10", "--sequences", "5", "--seq-len", "8"]);
    let b = ok(&["gen-corpus", "--seed", "4", "--vocab", "10", "--sequences", "5", "--seq-len", "8"]);
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin(&["decode", "--checkpoint", "/nonexistent/model", "--prompt", "1"]).status.code(), Some(2));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(bin(&["init"]).status.code(), Some(2));
}
