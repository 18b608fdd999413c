use std::path::Path;
use std::process::{Command, Output};

use specdec::bench::{BenchDataset, RunReport};
use specdec::hybrid_engine::Mode;

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_specdec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn specdec");
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    let corpus = dir.path().join("corpus.txt");
    let trained = dir.path().join("trained");
    let dataset = dir.path().join("data.jsonl");
    let report = dir.path().join("report.json");

    ok(&["seed-model", "--out", p(&model), "--seed", "3", "--vocab", "32", "--hidden", "16"]);
    ok(&[
        "gen-corpus", "--model", p(&model), "--out", p(&corpus), "--seed", "1",
        "--count", "2", "--text-len", "32", "--chunk", "16", "--gen-tokens", "16",
    ]);
    let text = std::fs::read_to_string(&corpus).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.split(' ').count() == 32));

    ok(&[
        "train", "--model", p(&model), "--corpus", p(&corpus), "--out", p(&trained),
        "--depth", "3", "--iterations", "3", "--batch-size", "2", "--drafter-dim", "8", "--seq-len", "32",
    ]);
    let spec = trained.join("drafter_spec.bin");
    let nospec = trained.join("drafter_nospec.bin");
    assert!(spec.exists() && nospec.exists());
    let csv = std::fs::read_to_string(trained.join("loss_spec.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iter,loss"));
    assert_eq!(csv.lines().count(), 4);

    let engine = [
        "--model", p(&model), "--drafter-spec", p(&spec), "--drafter-nospec", p(&nospec),
        "--tree-size", "12", "--top-k", "3", "--depth", "3", "--spec-token", "on",
        "--threshold-c", "2.5", "--max-spec-factor", "2", "--max-suffix-depth", "16",
    ];
    let mut args = vec!["generate", "--mode", "hybrid", "--prompt-tokens", "1,2,3,1,2,3", "--max-new-tokens", "20"];
    args.extend(engine);
    let g: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(g["tokens"].as_array().unwrap().len(), 20);
    assert_eq!(g["config"]["tree"]["size"], 12);

    std::fs::write(
        &dataset,
        "{\"id\": \"b\", \"prompt_tokens\": [4, 5, 6, 4, 5, 6, 4, 5], \"max_new_tokens\": 12}\n\
         {\"id\": \"a\", \"prompt_tokens\": [9, 1, 30], \"max_new_tokens\": 10}\n",
    )
    .unwrap();
    let mut args = vec!["bench", "--dataset", p(&dataset), "--out", p(&report), "--mode", "owl,suffix,hybrid"];
    args.extend(engine);
    ok(&args);
    let r: RunReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.examples.len(), 8);
    assert_eq!(r.examples[0].id, "a");
    assert_eq!(r.examples[0].mode, Mode::Vanilla);
    assert_eq!(r.config.engine.suffix.max_suffix_depth, 16);
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let bucket = &raw["histogram"]["owl"][0];
    assert!(bucket["bucket_min"].is_u64() && bucket["count"].is_u64());

    let mut args = vec!["verify-lossless", "--count", "5", "--seed", "2", "--max-new-tokens", "16"];
    args.extend(engine);
    let out = ok(&args);
    assert!(out.contains("0 mismatches"), "{out}");
    let mut args = vec!["verify-lossless", "--dataset", p(&dataset), "--spec-token", "off"];
    args.extend(&engine[..6]);
    ok(&args);

    // owl mode without its drafter
    let out = run(&["generate", "--model", p(&model), "--mode", "owl", "--prompt", "hi"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("drafter"));
    // text prompt, byte tokenized, rejected by a 32-token vocabulary
    let bytes = dir.path().join("bytes.jsonl");
    std::fs::write(&bytes, "{\"id\": \"x\", \"prompt\": \"hello\", \"max_new_tokens\": 4}\n").unwrap();
    assert_eq!(BenchDataset::load(&bytes).unwrap().examples[0].prompt_tokens, vec![104, 101, 108, 108, 111]);
    let out = run(&["bench", "--model", p(&model), "--dataset", p(&bytes), "--out", p(&report), "--mode", "suffix"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--seed", "4", "--coords", "100"]);
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(r["checked"], 100);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-3);
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let out = run(&["generate", "--model", "m.bin", "--mode", "eagle", "--prompt", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eagle"));
}
