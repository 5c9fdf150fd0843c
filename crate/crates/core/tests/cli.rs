//! Exit codes and end-to-end runs of the `etecap` binary.

use std::path::Path;
use std::process::{Command, Output};

fn etecap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etecap"))
        .args(args)
        .current_dir(dir)
        .env_remove("ETECAP_SEED")
        .output()
        .expect("run etecap")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"{
  "data": {"manifest": "data/manifest.jsonl"},
  "output_dir": "run",
  "encoder": {"backend": "tiny_conv", "feature_dim": 8, "num_frames": 4, "channels": [3, 4]},
  "decoder": {"hidden_dim": 8, "embed_dim": 6, "attention_dim": 8},
  "train": {"mini_batch_size": 8, "accumulate_step": 1, "stage1_epochs": 1, "stage2_epochs": 1}
}"#;

fn tiny_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), r#"{"num_frames": 4, "clips_per_combo": 1}"#).unwrap();
    let o = etecap(&["gen-data", "--out", "data", "--spec", "spec.json", "--references"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn train_caption_score_pipeline() {
    let dir = tiny_workspace();
    let p = dir.path();
    let o = etecap(&["train", "--config", "tiny.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["stage1.ckpt", "stage2.ckpt", "vocab.txt", "train_log.jsonl", "config.resolved.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(p.join("run/train_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].as_f64().unwrap().is_finite());
    }

    let o = etecap(
        &["caption", "--checkpoint", "run/stage2.ckpt", "--manifest", "data/manifest.jsonl", "--split", "test", "--beam", "2", "--out", "cand.jsonl"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = etecap(&["score", "--candidates", "cand.jsonl", "--references", "data/references_test.jsonl"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["bleu4", "rouge_l", "cider_d"] {
        assert!(report[k].as_f64().is_some(), "{k}");
    }

    // same checkpoint, references from another split: ids disagree
    let o = etecap(&["score", "--candidates", "cand.jsonl", "--references", "data/references_val.jsonl"], p);
    assert_eq!(code(&o), 4);

    // resuming with a different decoder size
    let other = TINY.replace(r#""hidden_dim": 8"#, r#""hidden_dim": 9"#);
    std::fs::write(p.join("other.json"), other).unwrap();
    let o = etecap(&["train", "--config", "other.json", "--stage", "2", "--resume", "run/stage1.ckpt"], p);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    // resuming with the same configuration runs stage 2 only
    let o = etecap(
        &["train", "--config", "tiny.json", "--stage", "2", "--resume", "run/stage1.ckpt", "--output-dir", "resumed"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("resumed/stage2.ckpt").exists() && !p.join("resumed/stage1.ckpt").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.json"), r#"{"train": {"accumulate_step": 0}}"#).unwrap();
    assert_eq!(code(&etecap(&["train", "--config", "bad.json"], p)), 2);
    std::fs::write(p.join("unknown.json"), r#"{"nonsense": true}"#).unwrap();
    assert_eq!(code(&etecap(&["train", "--config", "unknown.json"], p)), 2);

    std::fs::write(p.join("ok.json"), TINY).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_etecap"))
        .args(["train", "--config", "ok.json"])
        .current_dir(p)
        .env("ETECAP_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_checkpoint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("junk.ckpt"), b"ETCK garbage").unwrap();
    std::fs::write(p.join("m.jsonl"), "").unwrap();
    let o = etecap(&["caption", "--checkpoint", "junk.ckpt", "--manifest", "m.jsonl"], p);
    assert_eq!(code(&o), 3);
}

#[test]
fn duplicate_candidate_ids_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.jsonl"), "{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"a\",\"caption\":\"y\"}\n").unwrap();
    std::fs::write(p.join("r.jsonl"), "{\"id\":\"a\",\"captions\":[\"x\"]}\n").unwrap();
    assert_eq!(code(&etecap(&["score", "--candidates", "c.jsonl", "--references", "r.jsonl"], p)), 4);
}

#[test]
fn check_grads_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = etecap(&["check-grads", "--encoder"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 20 && out.lines().all(|l| l.starts_with("PASS")), "{out}");
}
