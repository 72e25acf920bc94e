use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ecrc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecrc")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = "epochs = 3\nsentence_dim = 16\nword_dim = 4\nhidden = 8,8\nbatch_size = 8\nsynth_conversations = 20\n";

/// Temp dir holding a small synthetic corpus and a matching config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = ecrc(dir.path(), &["synth", "--config", "small.cfg", "--out", "data.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ecrc(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.cfg"), "colour = blue\n").unwrap();
    let out = ecrc(dir.path(), &["gradcheck", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("colour"));
    assert_eq!(ecrc(dir.path(), &["gradcheck", "--threads", "0"]).status.code(), Some(1));
    assert_eq!(ecrc(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_input_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecrc(dir.path(), &["ingest", "--data", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.jsonl"));
}

#[test]
fn malformed_corpus_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": \"x\"}\n").unwrap();
    let out = ecrc(dir.path(), &["ingest", "--data", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecrc(dir.path(), &["gradcheck", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("PASS max_rel_err < 1e-4"), "{text}");
    for case in ["graph", "graph-node", "graph-node-edge", "bilm-mix"] {
        assert!(text.contains(&format!("case {case}: PASS")), "{text}");
    }
    let strict = ecrc(dir.path(), &["gradcheck", "--tol", "1e-30"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(stdout(&strict).contains("FAIL"));
}

#[test]
fn effective_config_follows_precedence() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_ecrc"))
        .args(["ingest", "--config", "small.cfg", "--epochs", "9", "--lr", "0.2", "--data", "data.jsonl"])
        .env("ECRC_LR", "0.3")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("epochs = 9"), "{err}");
    assert!(err.contains("lr = 0.3"), "{err}");
    assert!(err.contains("word_dim = 4"), "{err}");
}

#[test]
fn ingest_reports_synthetic_corpus() {
    let dir = workspace();
    let out = ecrc(dir.path(), &["ingest", "--config", "small.cfg", "--data", "data.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("20"), "{}", stdout(&out));
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = workspace();
    let d = dir.path();
    let out = ecrc(d, &["train", "--config", "small.cfg", "--data", "data.jsonl", "--checkpoint", "m.ckpt", "--test-out", "test.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let history = fs::read_to_string(d.join("m.ckpt.loss")).unwrap();
    assert!(history.starts_with("# ecrc train\n"));
    assert!(!history.contains("threads"));
    assert!(history.lines().any(|l| l == "step loss"));

    let out = ecrc(d, &["eval", "--checkpoint", "m.ckpt", "--data", "test.jsonl", "--json", "m.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = stdout(&out);
    for row in ["macro avg", "weighted avg", "Joy", "Financial"] {
        assert!(report.contains(row), "missing {row}: {report}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert!(json["emotion"]["weighted"]["f1"].is_number(), "{json}");
    assert!(json["config"].is_object(), "{json}");

    let line = fs::read_to_string(d.join("test.jsonl")).unwrap().lines().find(|l| !l.starts_with('#')).unwrap().to_string();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ecrc"))
        .args(["predict", "--checkpoint", "m.ckpt"])
        .current_dir(d)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(format!("{line}\n").as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let pred: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(pred["emotion"]["label"].is_string(), "{pred}");
    assert!(pred["causality"]["label"].is_string(), "{pred}");

    let id = serde_json::from_str::<serde_json::Value>(&line).unwrap()["id"].as_str().unwrap().to_string();
    let out = ecrc(d, &["inspect-graph", "--checkpoint", "m.ckpt", "--data", "test.jsonl", "--id", &id]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains(&id));
}

#[test]
fn embed_writes_interchange_tables() {
    let dir = workspace();
    let d = dir.path();
    let out = ecrc(
        d,
        &["embed", "--config", "small.cfg", "--data", "data.jsonl", "--sentence-out", "s.emb", "--word-out", "w.emb"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let sentences = fs::read_to_string(d.join("s.emb")).unwrap();
    assert!(sentences.starts_with("ECRC-EMB v1 sentence 16\n"), "{sentences}");
    let out = ecrc(
        d,
        &[
            "train", "--config", "small.cfg", "--data", "data.jsonl", "--checkpoint", "f.ckpt", "--sentence-source", "file",
            "--sentence-file", "s.emb", "--word-source", "file", "--word-file", "w.emb",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
}
