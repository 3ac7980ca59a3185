use std::path::Path;
use std::process::{Command, Output};

fn svlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svlm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = svlm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "corpus": {"n_pairs": 48, "n_docs": 8, "n_eval": 4},
  "model": {"hidden": 16, "ffn_dim": 32, "heads": 2, "layers_enc": 1, "layers_dec": 1},
  "train": {"steps": 4, "pairs_per_batch": 4, "docs_per_batch": 1},
  "vqa": {"n_train": 12, "n_eval": 6, "finetune": {"steps": 2, "batch": 4}},
  "eval": {"max_len": 6}
}"#;

#[test]
fn mask_dump_matches_prefix_definition() {
    let out = ok(&["inspect", "mask", "--t", "4", "--tp", "2"]);
    assert_eq!(out.lines().collect::<Vec<_>>(), ["1100", "1100", "1110", "1111"]);
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = svlm(&["--config", p(&cfg), "datagen", "--out", p(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"model": {"heads": 5}}"#).unwrap();
    let out = svlm(&["--config", p(&cfg), "datagen", "--out", p(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn end_to_end_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let c = |rest: &[&str]| {
        let mut args = vec!["--config", p(&cfg)];
        args.extend_from_slice(rest);
        ok(&args)
    };
    c(&["datagen", "--out", p(&d.join("corpus"))]);
    c(&["datagen", "--out", p(&d.join("corpus2"))]);
    let manifest = std::fs::read_to_string(d.join("corpus/manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read_to_string(d.join("corpus2/manifest.json")).unwrap());
    let leakage = std::fs::read_to_string(d.join("corpus/leakage.json")).unwrap();
    assert!(leakage.contains("0"), "{leakage}");

    let vocab = d.join("vocab.txt");
    c(&["tokenizer-train", "--corpus", p(&d.join("corpus")), "--out", p(&vocab)]);
    let run = d.join("run");
    let corpus = d.join("corpus");
    let io = ["--corpus", p(&corpus), "--vocab", p(&vocab)];
    let mut args = vec!["pretrain"];
    args.extend_from_slice(&io);
    args.extend_from_slice(&["--out", p(&run)]);
    c(&args);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 5, "header plus one line per step");

    let ckpt = run.join("final.svlm");
    let preds = d.join("preds.jsonl");
    let mut args = vec!["decode"];
    args.extend_from_slice(&io);
    args.extend_from_slice(&["--checkpoint", p(&ckpt), "--prompt", "a picture of", "--beam", "2", "--out", p(&preds)]);
    c(&args);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 4);

    let ft = d.join("ft");
    c(&["finetune", "--checkpoint", p(&ckpt), "--vocab", p(&vocab), "--task", "vqa", "--out", p(&ft)]);
    let out = c(&["inspect", "params", "--checkpoint", p(&ckpt)]);
    assert!(out.contains("embed.pos_image"));
}

#[test]
fn printed_config_is_accepted_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("full.json");
    let printed = ok(&["--seed", "7", "inspect", "config"]);
    std::fs::write(&cfg, &printed).unwrap();
    let again = ok(&["--config", p(&cfg), "inspect", "config"]);
    assert_eq!(printed, again);
    assert!(printed.contains("\"seed\": 7"));
}
