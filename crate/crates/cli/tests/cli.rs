use std::path::Path;
use std::process::{Command, Output};

use esc_core::corpus::{load_esconv, save_esconv, synthetic_corpus};

fn esc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esc"))
        .args(args)
        .env_remove("ESC_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn esc")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("corpus.json");
    save_esconv(&path, &synthetic_corpus(n, 3)).unwrap();
    path
}

#[test]
fn split_eight_one_one() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 10);
    let out = dir.path().join("split");
    let o = esc(&["split", "--input", p(&input), "--out-dir", p(&out), "--ratio", "8:1:1", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sizes: Vec<usize> = ["train", "dev", "test"]
        .iter()
        .map(|n| load_esconv(&out.join(format!("{n}.json"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![8, 1, 1]);
}

#[test]
fn train_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 4);
    let o = esc(&[
        "train", "--train", p(&input), "--out-dir", p(&dir.path().join("run")), "--gamma", "1,0.2,1,1", "--lr", "2e-5",
        "--warmup", "120", "--batch", "20", "--window", "2", "--dry-run",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let t = &v["train"];
    assert_eq!(t["gamma"], serde_json::json!([1.0, 0.2, 1.0, 1.0]));
    assert_eq!(t["base_lr"], 2e-5);
    assert_eq!(t["warmup_steps"], 120);
    assert_eq!(t["batch_size"], 20);
    assert_eq!(t["window_w"], 2);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 4);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"batch_size": 7, "base_lr": 0.1}}"#).unwrap();
    let o = esc(&[
        "--config", p(&cfg), "train", "--train", p(&input), "--out-dir", p(dir.path()), "--lr", "0.5", "--dry-run",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["train"]["batch_size"], 7);
    assert_eq!(v["train"]["base_lr"], 0.5);
}

#[test]
fn exit_codes() {
    assert_eq!(esc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(esc(&["split", "--input", "x.json"]).status.code(), Some(2));
    assert_eq!(esc(&["split", "--input", "a", "--out-dir", "b", "--bogus"]).status.code(), Some(2));
    let o = esc(&["split", "--input", "/nonexistent/in.json", "--out-dir", "/tmp/esc-never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"no_such_field": 1}}"#).unwrap();
    let input = corpus(dir.path(), 2);
    let o = esc(&["--config", p(&cfg), "train", "--train", p(&input), "--out-dir", p(dir.path()), "--dry-run"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 10);
    let split = dir.path().join("split");
    let run = dir.path().join("run");
    assert!(esc(&["split", "--input", p(&input), "--out-dir", p(&split)]).status.success());
    let o = esc(&[
        "train", "--train", p(&split.join("train.json")), "--dev", p(&split.join("dev.json")), "--out-dir", p(&run),
        "--model-size", "tiny", "--max-steps", "3", "--batch", "4", "--eval-every", "2", "--checkpoint-every", "2",
        "--cache-dir", p(&dir.path().join("cache")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["loss.csv", "last.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let ckpt = run.join("last.ckpt");
    let test = split.join("test.json");
    let sampling = ["--top-p", "0.3", "--top-k", "30", "--temperature", "0.7", "--rep-penalty", "1.03", "--seed", "1"];
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("gen{i}.jsonl"));
        let mut args = vec!["generate", "--checkpoint", p(&ckpt), "--data", p(&test), "--output", p(&out)];
        args.extend(sampling);
        let o = esc(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);

    let report = dir.path().join("report.json");
    let gens = dir.path().join("eval.jsonl");
    let o = esc(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&split.join("test.json")), "--report", p(&report),
        "--generations", p(&gens),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["acc_top_n"].as_array().unwrap().len(), 8);
    assert!(v["ppl"].as_f64().unwrap() > 1.0);
}

#[test]
fn chat_prints_strategy_and_reply() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 4);
    let run = dir.path().join("run");
    let o = esc(&["train", "--train", p(&input), "--out-dir", p(&run), "--model-size", "tiny", "--max-steps", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut child = Command::new(env!("CARGO_BIN_EXE_esc"))
        .args(["chat", "--checkpoint", p(&run.join("last.ckpt")), "--max-new-tokens", "5"])
        .env_remove("ESC_CONFIG")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"i feel so lonely\n\nwork is awful\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.starts_with('[') && l.contains(']')));
}

#[test]
fn annotate_fills_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut dialogues = synthetic_corpus(3, 1);
    for d in &mut dialogues {
        for u in &mut d.utterances {
            u.keywords = None;
            u.emotion = None;
        }
    }
    let input = dir.path().join("raw.json");
    save_esconv(&input, &dialogues).unwrap();
    let out = dir.path().join("ann.json");
    let o = esc(&["annotate", "--input", p(&input), "--output", p(&out), "--keywords-k", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ann = load_esconv(&out).unwrap();
    for u in ann.iter().flat_map(|d| &d.utterances) {
        assert!(u.keywords.as_ref().is_some_and(|k| k.len() <= 2));
        assert_eq!(u.emotion.is_some(), u.speaker == esc_core::corpus::Speaker::Seeker);
    }
}
