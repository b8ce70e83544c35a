//! End-to-end smoke tests of the binary: the full toy workflow, the
//! transform golden string, scoring conventions, exit codes, and
//! reproducibility.

use entmark::corpus::{CorpusSpec, SplitCounts};
use entmark::decoder::{Hypothesis, NBestRecord};
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_entmark"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("spawn");
    assert!(
        out.status.success(),
        "entmark {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_small_spec(path: &Path) {
    let spec = CorpusSpec {
        counts: SplitCounts {
            train: 40,
            dev: 8,
            test: 8,
        },
        feature_dim: 6,
        noise_sigma: 0.15,
        duration_range: (2, 3),
        seed: 31,
        ..CorpusSpec::default()
    };
    std::fs::write(path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
}

#[test]
fn full_toy_pipeline_produces_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_small_spec(&d.join("spec.json"));
    std::fs::write(
        d.join("net.json"),
        r#"{"conv_channels": 12, "hidden": 12, "rnn_layers": 1, "epochs": 2, "batch_size": 8}"#,
    )
    .unwrap();
    run_ok(
        &["corpus", "gen", "--spec", "spec.json", "--out", "corpus"],
        d,
    );
    assert!(d.join("corpus/manifest.jsonl").exists());
    assert!(d.join("corpus/alphabet.txt").exists());
    assert!(d.join("corpus/spec.json").exists());
    run_ok(
        &[
            "train",
            "--phase",
            "asr",
            "--config",
            "net.json",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out",
            "asr.ck",
        ],
        d,
    );
    assert!(d.join("asr.ck").exists());
    assert!(d.join("asr.stats.jsonl").exists());
    assert!(d.join("asr.config.json").exists());
    run_ok(
        &[
            "train",
            "--phase",
            "ner",
            "--from",
            "asr.ck",
            "--config",
            "net.json",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out",
            "ner.ck",
        ],
        d,
    );
    run_ok(
        &[
            "lm", "train", "--manifest", "corpus/manifest.jsonl", "--order", "2", "--tagged",
            "--out", "lm.arpa",
        ],
        d,
    );
    run_ok(
        &[
            "decode",
            "--ckpt",
            "ner.ck",
            "--manifest",
            "corpus/manifest.jsonl",
            "--lm",
            "lm.arpa",
            "--beam",
            "8",
            "--out",
            "nbest.jsonl",
        ],
        d,
    );
    let out = run_ok(
        &[
            "eval",
            "--ref",
            "corpus/manifest.jsonl",
            "--hyp",
            "nbest.jsonl",
            "--mode",
            "category",
            "--wer",
            "--out",
            "report.json",
        ],
        d,
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("F-measure"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in ["category", "cat_value", "value_accuracy", "wer", "cer"] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
    for key in ["precision", "recall", "f_measure"] {
        assert!(report["category"].get(key).is_some());
    }
    // Pipeline baseline over the same checkpoint chain.
    run_ok(
        &[
            "pipeline",
            "--ckpt",
            "asr.ck",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out",
            "pip.jsonl",
        ],
        d,
    );
    run_ok(
        &[
            "eval",
            "--ref",
            "corpus/manifest.jsonl",
            "--hyp",
            "pip.jsonl",
            "--mode",
            "catvalue",
        ],
        d,
    );
    // Augmentation re-emits train records with rule-derived tags.
    run_ok(
        &[
            "augment",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out",
            "augmented.jsonl",
        ],
        d,
    );
    let augmented = std::fs::read_to_string(d.join("augmented.jsonl")).unwrap();
    assert!(augmented.contains("\"source\":\"augmented\""));
}

#[test]
fn transform_star_reproduces_the_golden_string() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("tagged.txt"),
        "le sculpteur [ césar ] est mort # hier ] à $ paris ] à l'âge de % soixante dix sept ans ]\n",
    )
    .unwrap();
    run_ok(
        &["transform", "--star", "--in", "tagged.txt", "--out", "starred.txt"],
        d,
    );
    assert_eq!(
        std::fs::read_to_string(d.join("starred.txt")).unwrap(),
        "* [ césar ] * # hier ] * $ paris ] * % soixante dix sept ans ]\n"
    );
}

#[test]
fn transform_encode_builds_tagged_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("records.jsonl"),
        r#"{"words": ["césar", "est", "né"], "entities": [{"category": "pers", "start": 0, "end": 1}]}"#,
    )
    .unwrap();
    run_ok(
        &["transform", "--encode", "--in", "records.jsonl", "--out", "tagged.txt"],
        d,
    );
    assert_eq!(
        std::fs::read_to_string(d.join("tagged.txt")).unwrap(),
        "[ césar ] est né\n"
    );
}

#[test]
fn eval_of_reference_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_small_spec(&d.join("spec.json"));
    run_ok(
        &["corpus", "gen", "--spec", "spec.json", "--out", "corpus"],
        d,
    );
    let records =
        entmark::corpus::read_manifest(&d.join("corpus/manifest.jsonl")).unwrap();
    let hyps: Vec<NBestRecord> = records
        .iter()
        .filter(|r| r.split == entmark::corpus::Split::Test)
        .map(|r| NBestRecord {
            id: r.id.clone(),
            nbest: vec![Hypothesis {
                tagged: r.tagged.clone(),
                q: 0.0,
                ctc_logp: 0.0,
                lm_logp: 0.0,
                wc: 0,
            }],
        })
        .collect();
    entmark::decoder::write_nbest(&d.join("self.jsonl"), &hyps).unwrap();
    run_ok(
        &[
            "eval", "--ref", "corpus/manifest.jsonl", "--hyp", "self.jsonl", "--out",
            "report.json",
        ],
        d,
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["category"]["f_measure"], 1.0);
    assert_eq!(report["cat_value"]["f_measure"], 1.0);
    assert_eq!(report["value_accuracy"], 1.0);
}

#[test]
fn corpus_generation_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_small_spec(&d.join("spec.json"));
    run_ok(&["corpus", "gen", "--spec", "spec.json", "--out", "a"], d);
    run_ok(&["corpus", "gen", "--spec", "spec.json", "--out", "b"], d);
    let a = std::fs::read(d.join("a/manifest.jsonl")).unwrap();
    let b = std::fs::read(d.join("b/manifest.jsonl")).unwrap();
    assert_eq!(a, b);
    let fa = std::fs::read(d.join("a/features/train-000000.feat")).unwrap();
    let fb = std::fs::read(d.join("b/features/train-000000.feat")).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Unknown flag: usage error, exit 1.
    let out = bin()
        .args(["corpus", "gen", "--bogus-flag", "x"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Missing input file: data error, exit 2, message names the path.
    let out = bin()
        .args(["corpus", "gen", "--spec", "missing.json", "--out", "c"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("missing.json"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // Schema violation: data error naming the field.
    std::fs::write(d.join("bad.json"), r#"{"unknown_field": 3}"#).unwrap();
    let out = bin()
        .args(["corpus", "gen", "--spec", "bad.json", "--out", "c"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("unknown_field"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // Help exits 0.
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
