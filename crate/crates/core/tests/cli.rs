use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tonicnet::synthetic::{synthetic_corpus, SyntheticConfig};

fn tonicnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tonicnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn small_corpus(dir: &Path) -> PathBuf {
    let corpus = synthetic_corpus(&SyntheticConfig {
        train: 3,
        valid: 2,
        test: 2,
        min_steps: 8,
        max_steps: 12,
        seed: 11,
    });
    let path = dir.join("corpus.json");
    std::fs::write(&path, corpus.to_interchange_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stats_succeeds() {
    let out = tonicnet(&["stats", s(&fixture("toy_corpus.json"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(tonicnet(&["transmogrify"]).status.code(), Some(1));
    assert_eq!(tonicnet(&["train"]).status.code(), Some(1));
    assert_eq!(tonicnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_corpus_exits_2() {
    let out = tonicnet(&["stats", "/nonexistent/corpus.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let ckpt = dir.path().join("cs.ckpt");
    let out = tonicnet(&[
        "train", s(&corpus), "-o", s(&ckpt), "--model", "toy", "--streams", "CS",
        "--epochs", "2", "--warmup-epochs", "1", "--augment", "none",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cs.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 1);
    let log = std::fs::read_to_string(dir.path().join("cs.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // The checkpoint was trained on C and S only.
    let out = tonicnet(&["eval", s(&corpus), "--checkpoint", s(&ckpt), "--streams", "CSB"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tonicnet(&["eval", s(&corpus), "--checkpoint", s(&ckpt), "--streams", "CS", "--json"]);
    assert_eq!(out.status.code(), Some(0));

    // Same seed, same bytes.
    let full = fixture("toy.ckpt");
    let (a, b) = (dir.path().join("a.mid"), dir.path().join("b.mid"));
    for path in [&a, &b] {
        let out = tonicnet(&["sample", "--checkpoint", s(&full), "--seed", "5", "--max-tokens", "400", "--out", s(path)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(&bytes[..4], b"MThd");
    assert!(dir.path().join("a.mid.manifest.json").exists());
}

#[test]
fn unknown_start_chord_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tonicnet(&[
        "sample", "--checkpoint", s(&fixture("toy.ckpt")), "--start-chord", "H:maj",
        "--out", s(&dir.path().join("x.mid")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn assert_json_close(got: &Value, want: &Value, path: &str) {
    match (got, want) {
        (Value::Object(g), Value::Object(w)) => {
            assert_eq!(g.keys().collect::<Vec<_>>(), w.keys().collect::<Vec<_>>(), "{path}");
            for (k, v) in w {
                assert_json_close(&g[k], v, &format!("{path}.{k}"));
            }
        }
        (Value::Number(g), Value::Number(w)) if w.is_f64() => {
            let (g, w) = (g.as_f64().unwrap(), w.as_f64().unwrap());
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{path}: {g} vs {w}");
        }
        _ => assert_eq!(got, want, "{path}"),
    }
}

#[test]
fn reference_checkpoint_reproduces_recorded_report() {
    let out = tonicnet(&[
        "eval", s(&fixture("toy_corpus.json")), "--checkpoint", s(&fixture("toy.ckpt")),
        "--split", "test", "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let got: Value = serde_json::from_slice(&out.stdout).unwrap();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(fixture("toy_eval_test.json")).unwrap()).unwrap();
    assert_json_close(&got, &want, "report");
}

#[test]
fn augment_writes_corpus_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out_path = dir.path().join("aug.json");
    let out = tonicnet(&["augment", s(&corpus), "-o", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let augmented = tonicnet::corpus::load_corpus(&out_path).unwrap();
    assert!(augmented.count(tonicnet::corpus::Split::Train) >= 3);
    assert!(dir.path().join("aug.json.provenance.json").exists());
}
