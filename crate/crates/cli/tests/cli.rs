use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bat"))
        .args(args)
        .output()
        .expect("run bat")
}

fn ok(args: &[&str]) -> Output {
    let out = bat(args);
    assert!(
        out.status.success(),
        "bat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synthesize",
        "--out",
        s(dir),
        "--vocab-size",
        "300",
        "--topics",
        "6",
        "--train-docs",
        "120",
        "--dev-docs",
        "40",
        "--test-docs",
        "40",
        "--seed",
        "3",
    ]);
}

fn quick_train(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--corpus-dir",
        s(corpus),
        "--out-dir",
        s(out),
        "--k",
        "16",
        "--epochs",
        "5",
        "--seed",
        "1",
        "--restarts",
        "1",
        "--hidden-dim",
        "16",
        "--batch-size",
        "50",
    ];
    args.extend_from_slice(extra);
    bat(&args)
}

#[test]
fn train_smoke_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    for r in [&r1, &r2] {
        let out = quick_train(&corpus, r, &["--lambda", "0"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let m1 = fs::read_to_string(r1.join("run-1/metrics.jsonl")).unwrap();
    let m2 = fs::read_to_string(r2.join("run-1/metrics.jsonl")).unwrap();
    assert_eq!(m1.lines().count(), 5);
    assert_eq!(m1, m2);
    let first: Value = serde_json::from_str(m1.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "kl_weight", "dev_npmi"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert!(r1.join("run-1/checkpoint.batm").exists());
    assert!(r1.join("aggregate.json").exists());

    let resolved: Value = serde_json::from_str(&fs::read_to_string(r1.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["command"], "train");
    assert_eq!(resolved["config"]["topics"], 16);
    assert_eq!(resolved["config"]["kd"]["lambda"], 0.0);
    assert_eq!(resolved["config"]["learning_rate"], 0.002);
}

#[test]
fn lambda_without_teacher_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let out = quick_train(&corpus, &tmp.path().join("r"), &["--lambda", "0.75"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher-logits"));
}

#[test]
fn bad_flags_and_values_exit_2() {
    assert_eq!(bat(&["train", "--bogus"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = bat(&["train", "--corpus-dir", s(tmp.path()), "--anneal", "0", "--lambda", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 3, "unknown_key": 1}"#).unwrap();
    let out = bat(&["train", "--config", s(&cfg), "--corpus-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 2, "topics": 4, "hidden_dim": 8, "restarts": 1, "kd": {"lambda": 0.0, "temperature": 2.0, "clip": 0.0}}"#).unwrap();
    let out_dir = tmp.path().join("r");
    ok(&["train", "--config", s(&cfg), "--corpus-dir", s(&corpus), "--out-dir", s(&out_dir), "--epochs", "3"]);
    let m = fs::read_to_string(out_dir.join("run-1/metrics.jsonl")).unwrap();
    assert_eq!(m.lines().count(), 3);
}

#[test]
fn teacher_pipeline_eval_and_align() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let logits = tmp.path().join("teacher.batl");
    ok(&["surrogate-teacher", "--corpus-dir", s(&corpus), "--out", s(&logits), "--out-dir", s(tmp.path())]);
    let check = json(&ok(&[
        "check-teacher",
        "--corpus-dir",
        s(&corpus),
        "--teacher-logits",
        s(&logits),
        "--out-dir",
        s(tmp.path()),
    ]));
    assert_eq!(check["docs"], 120);

    let runs = tmp.path().join("runs");
    let out = quick_train(&corpus, &runs, &["--lambda", "0.75", "--temp", "2", "--teacher-logits", s(&logits)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = runs.join("run-1/checkpoint.batm");

    let dev = json(&ok(&["eval", "--model", s(&model), "--corpus-dir", s(&corpus), "--split", "dev", "--out-dir", s(tmp.path())]));
    let test = json(&ok(&["eval", "--model", s(&model), "--corpus-dir", s(&corpus), "--split", "test", "--out-dir", s(tmp.path())]));
    assert_eq!(dev["topics"].as_array().unwrap().len(), 16);
    assert_eq!(dev["topics"][0]["words"].as_array().unwrap().len(), 10);
    assert!(dev["perplexity"].as_f64().unwrap() > 1.0);
    assert!(dev["redundant_pairs"].is_u64());
    assert_ne!(dev["mean_npmi"], test["mean_npmi"]);
    assert!(dev.get("external_npmi").is_none());
    let resolved: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["command"], "eval");

    let vocab = fs::read_to_string(corpus.join("vocab.txt")).unwrap();
    let words: Vec<&str> = vocab.lines().take(3).collect();
    let counts = tmp.path().join("ref.json");
    fs::write(
        &counts,
        serde_json::json!({
            "doc_count": 10,
            "df": {words[0]: 4, words[1]: 3, words[2]: 2, "not-in-vocab": 5},
            "joint": [[words[0], words[1], 2]]
        })
        .to_string(),
    )
    .unwrap();
    let ext = json(&ok(&[
        "eval",
        "--model",
        s(&model),
        "--corpus-dir",
        s(&corpus),
        "--external-counts",
        s(&counts),
        "--out-dir",
        s(tmp.path()),
    ]));
    assert!(ext["external_npmi"].is_f64());

    let topics = json(&ok(&["topics", "--model", s(&model), "--corpus-dir", s(&corpus), "--json", "--n", "5", "--out-dir", s(tmp.path())]));
    assert_eq!(topics.as_array().unwrap().len(), 16);

    let align = json(&ok(&[
        "align",
        "--model-a",
        s(&model),
        "--model-b",
        s(&model),
        "--corpus-dir",
        s(&corpus),
        "--brackets",
        "5",
        "--per-bracket",
        "3",
        "--seed",
        "7",
        "--threshold",
        "10",
        "--out-dir",
        s(tmp.path()),
    ]));
    let pairs = align["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 16);
    assert!(pairs.iter().all(|p| p["jsd"].as_f64().unwrap() < 1e-10));
    assert_eq!(align["wins"]["ties"], 10);
    assert_eq!(align["threshold"], 10);
    assert_eq!(align["sampled"].as_array().unwrap().len(), 15);
}

#[test]
fn corrupt_checkpoint_and_vocab_mismatch_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let runs = tmp.path().join("runs");
    assert!(quick_train(&corpus, &runs, &["--lambda", "0"]).status.success());
    let model = runs.join("run-1/checkpoint.batm");

    let bytes = fs::read(&model).unwrap();
    let broken = tmp.path().join("broken.batm");
    fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    let out = bat(&["eval", "--model", s(&broken), "--corpus-dir", s(&corpus), "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let other = tmp.path().join("other");
    ok(&["synthesize", "--out", s(&other), "--vocab-size", "150", "--train-docs", "60", "--seed", "4"]);
    let out = bat(&["eval", "--model", s(&model), "--corpus-dir", s(&other), "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let out = bat(&["align", "--model-a", s(&model), "--model-b", s(&model), "--corpus-dir", s(&other), "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn truncated_teacher_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let logits = tmp.path().join("t.batl");
    ok(&["surrogate-teacher", "--corpus-dir", s(&corpus), "--out", s(&logits), "--out-dir", s(tmp.path())]);
    let bytes = fs::read(&logits).unwrap();
    fs::write(&logits, &bytes[..bytes.len() - 4]).unwrap();
    let out = bat(&["check-teacher", "--corpus-dir", s(&corpus), "--teacher-logits", s(&logits), "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected"));
}
