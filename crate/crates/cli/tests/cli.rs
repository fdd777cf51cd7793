use std::path::Path;
use std::process::{Command, Output};

fn premsel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_premsel"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = premsel(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stamp(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    assert_eq!(v["format_version"], 1);
    v["run_config"].clone()
}

#[test]
fn usage_errors_exit_two_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(premsel(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(premsel(dir.path(), &["split", "--bogus"]).status.code(), Some(2));
    assert_eq!(premsel(dir.path(), &["split", "--data", "d", "--out", "o", "--strategy", "XX"]).status.code(), Some(2));
    let help = premsel(dir.path(), &["train-tokenizer", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--corpus", "--vocab-size", "--min-freq", "--out", "--config", "--seed", "--sequential"] {
        assert!(text.contains(flag), "help lacks {flag}");
    }
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = premsel(dir.path(), &["ingest", "--in", "missing.jsonl", "--out", "data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn ingest_then_split_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "syn"]);
    ok(d, &["ingest", "--in", "syn/corpus.jsonl", "--out", "data"]);
    assert!(d.join("data/corpus.json").exists() && d.join("data/proofs.json").exists());
    assert_eq!(stamp(&d.join("data/ingest_report.json"))["command"]["name"], "ingest");

    for out in ["a", "b"] {
        ok(d, &["--seed", "7", "split", "--data", "data", "--strategy", "RI", "--n-val", "5", "--n-test", "5", "--out", out]);
    }
    // Same arguments apart from the output path: every data file matches.
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let again = tempfile::tempdir().unwrap();
    std::fs::create_dir(again.path().join("data")).unwrap();
    for f in ["corpus.json", "proofs.json"] {
        std::fs::copy(d.join("data").join(f), again.path().join("data").join(f)).unwrap();
    }
    ok(again.path(), &["--seed", "7", "split", "--data", "data", "--strategy", "RI", "--n-val", "5", "--n-test", "5", "--out", "a"]);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "corpus.json", "proofs.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(again.path().join("a").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_environment_which_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "seed = 3\n[split]\nn_val = 4\nn_test = 4\nstrategy = \"PL\"\n").unwrap();
    ok(d, &["synth", "--out", "data"]);
    let out = Command::new(env!("CARGO_BIN_EXE_premsel"))
        .current_dir(d)
        .args(["--config", "run.toml", "split", "--data", "data", "--n-test", "6", "--out", "s"])
        .env("PREMSEL__SPLIT__N_VAL", "2")
        .env("PREMSEL__SPLIT__N_TEST", "9")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["val"], 2);
    assert_eq!(manifest["counts"]["test"], 6);
    assert_eq!(manifest["strategy"], "PL");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["run_config"]["split"]["n_test"], 6);
    assert_eq!(stamp(&d.join("s/corpus.json"))["seed"], 3);

    let bad = Command::new(env!("CARGO_BIN_EXE_premsel"))
        .current_dir(d)
        .args(["split", "--data", "data", "--out", "t"])
        .env("PREMSEL__SPLIT__NTEST", "9")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn outputs_never_replace_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data"]);
    let before = std::fs::read(d.join("data/corpus.json")).unwrap();
    assert_eq!(premsel(d, &["split", "--data", "data", "--n-val", "1", "--n-test", "1", "--out", "data"]).status.code(), Some(1));
    ok(d, &["train-tokenizer", "--corpus", "data", "--out", "vocab.txt"]);
    assert_eq!(premsel(d, &["pretrain", "--corpus", "data", "--vocab", "vocab.txt", "--steps", "1", "--out", "vocab.txt"]).status.code(), Some(1));
    assert_eq!(std::fs::read(d.join("data/corpus.json")).unwrap(), before);
}

#[test]
fn vocabulary_and_checkpoints_carry_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data"]);
    ok(d, &["split", "--data", "data", "--n-val", "0", "--n-test", "10", "--out", "split"]);
    ok(d, &["train-tokenizer", "--corpus", "split", "--vocab-size", "300", "--out", "vocab.txt"]);
    let vocab = std::fs::read_to_string(d.join("vocab.txt")).unwrap();
    let header = vocab.lines().find(|l| l.starts_with("# run_config=")).expect("config echo");
    let echoed: serde_json::Value = serde_json::from_str(&header["# run_config=".len()..]).unwrap();
    assert_eq!(echoed["tokenizer"]["vocab_size"], 300);

    let small = ["--config", "tiny.toml"];
    std::fs::write(d.join("tiny.toml"), "[encoder]\nhidden = 16\nintermediate = 32\nn_heads = 2\nmax_positions = 64\n[pretrain]\nmax_len = 64\n[retriever]\nbatch_size = 8\n").unwrap();
    ok(d, &[&small[..], &["pretrain", "--corpus", "split", "--vocab", "vocab.txt", "--steps", "2", "--out", "pre.ckpt"]].concat());
    ok(d, &[&small[..], &["train-retriever", "--split", "split", "--init", "pre.ckpt", "--mode", "conv", "--epochs", "1", "--out", "ret.ckpt"]].concat());
    ok(d, &["embed-corpus", "--corpus", "split", "--retriever", "ret.ckpt", "--out", "index.bin"]);
    let ids: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("index.bin.ids.json")).unwrap()).unwrap();
    assert_eq!(ids["format_version"], 1);
    assert_eq!(ids["run_config"]["command"]["name"], "embed-corpus");

    // The checkpoint remembers its similarity mode; a mismatched request fails.
    std::fs::write(d.join("state.txt"), "<GOAL> x = x\n").unwrap();
    let search = ["search", "--corpus", "split", "--retriever", "ret.ckpt", "--index", "index.bin", "--state-file", "state.txt", "--k", "3"];
    let out = ok(d, &search);
    let hits: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(hits.as_array().unwrap().len(), 3);
    assert_eq!(hits[0]["final_rank"], 1);
    assert_eq!(premsel(d, &[&search[..], &["--mode", "fine"]].concat()).status.code(), Some(1));
}
