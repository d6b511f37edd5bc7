use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use serde_json::Value;
use sha2::{Digest, Sha256};
use triprobe::embedio::{write_dataset, PackedDataset};
use triprobe::{PhonemeInventory, ProbeDataset};

fn triprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triprobe")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = triprobe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            out.insert(path.display().to_string(), hex::encode(Sha256::digest(fs::read(&path).unwrap())));
        }
    }
    out
}

/// A small corpus, its frame labels and a packed dataset.
fn prepare(dir: &Path) {
    ok(
        dir,
        &[
            "synth", "--out", "corpus", "--n-phonemes", "6", "--dim", "8", "--n-speakers", "3",
            "--utterances-per-speaker", "8",
        ],
    );
    ok(dir, &["label", "--segmentation", "corpus/segmentation.tsv", "--out", "labels.tsv"]);
    ok(
        dir,
        &[
            "dataset", "--segmentation", "corpus/segmentation.tsv", "--manifest", "corpus/manifest.json",
            "--labels", "labels.tsv", "--min-count", "5", "--out", "d.pds",
        ],
    );
}

const TRAIN: &[&str] =
    &["train", "--dataset", "d.pds", "--out", "m.prb", "--train-speakers", "spk0,spk1", "--epochs", "3", "--hidden", "16,16,16"];

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = triprobe(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage: triprobe <COMMAND>"), "{err}");
    assert!(err.contains("confusion"), "grammar lists the subcommands: {err}");
}

#[test]
fn missing_argument_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = triprobe(dir.path(), &["eval", "--model", "m.prb"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage: triprobe eval"));
    let out = triprobe(dir.path(), &["confusion", "--model", "m", "--dataset", "d", "--out", "c", "--position", "middle"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_on_an_empty_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let inventory = PhonemeInventory::from_symbols(["a", "p"]);
    let empty = ProbeDataset::new(inventory, 20, Array2::zeros((0, 4)), Vec::new()).unwrap();
    fs::write(dir.path().join("d.pds"), write_dataset(&PackedDataset::Triplet(empty))).unwrap();
    let out = triprobe(dir.path(), &["train", "--dataset", "d.pds", "--out", "m.prb"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("EmptyDataset"));
    assert!(!dir.path().join("m.prb").exists());
}

#[test]
fn corrupt_inputs_report_the_error_name() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.prb"), b"not a model").unwrap();
    fs::write(dir.path().join("d.pds"), b"PDS1").unwrap();
    let out = triprobe(dir.path(), &["eval", "--model", "m.prb", "--dataset", "d.pds", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BadMagic"));
    let out = triprobe(dir.path(), &["label", "--segmentation", "missing.tsv", "--out", "l.tsv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_writes_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let corpus_before = digests(&d.join("corpus"));

    let summary = ok(d, TRAIN);
    assert_eq!(summary["epochs"], 3);
    let history = fs::read_to_string(d.join("m.prb.loss.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    ok(d, &["eval", "--model", "m.prb", "--dataset", "d.pds", "--out", "report.json", "--speakers", "spk2"]);
    let report = json(&d.join("report.json"));
    for field in ["ordered", "unordered", "flexible_centre", "start_acc", "centre_acc", "end_acc"] {
        let v = report[field].as_f64().unwrap_or_else(|| panic!("{field} missing"));
        assert!((0.0..=1.0).contains(&v));
    }
    let (o, f, u) = (report["ordered"].as_f64().unwrap(), report["flexible_centre"].as_f64().unwrap(), report["unordered"].as_f64().unwrap());
    assert!(o <= f && f <= u);

    // The run manifest digests the inputs it read.
    let manifest = json(&d.join("report.json.run.json"));
    assert_eq!(manifest["command"], "eval");
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    for input in inputs {
        let path = d.join(input["path"].as_str().unwrap());
        assert_eq!(input["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(fs::read(path).unwrap())));
    }
    assert_eq!(manifest["outputs"], serde_json::json!(["report.json"]));

    ok(d, &["confusion", "--model", "m.prb", "--dataset", "d.pds", "--position", "end", "--out", "c.csv"]);
    let csv = fs::read_to_string(d.join("c.csv")).unwrap();
    assert!(csv.starts_with("true\\pred,"));
    assert_eq!(csv.lines().count(), 7);

    let base = ok(d, &["baseline", "--labels", "labels.tsv", "--kind", "border", "--trials", "500", "--out", "b.json"]);
    assert!((base["expected"].as_f64().unwrap() - 0.243).abs() < 1e-12);
    for field in ["protocol", "p", "expected", "simulated", "stderr", "trials"] {
        assert!(base.get(field).is_some(), "{field} missing");
    }

    let dec = ok(
        d,
        &[
            "decode", "--model", "m.prb", "--embeddings", "corpus/spk2_u000.femb", "--reference",
            "corpus/segmentation.tsv", "--out", "dec", "--targets", "ph00,ph01",
        ],
    );
    let frames = dec["frames"].as_u64().unwrap() as usize;
    let track = fs::read_to_string(d.join("dec/track.csv")).unwrap();
    assert_eq!(track.lines().count(), 1 + frames * 3 * 2);
    assert!(json(&d.join("dec/accuracy.json"))["ordered_accuracy"].is_number());
    assert!(json(&d.join("dec/boundaries.json")).is_array());
    assert!(d.join("dec/run.json").exists());

    assert_eq!(digests(&d.join("corpus")), corpus_before, "inputs are never modified");
}

#[test]
fn runs_are_reproducible_from_their_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(d, TRAIN);
    let first = fs::read(d.join("m.prb")).unwrap();
    let manifest = json(&d.join("m.prb.run.json"));
    let argv: Vec<String> =
        manifest["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    fs::remove_file(d.join("m.prb")).unwrap();
    ok(d, &argv);
    assert_eq!(fs::read(d.join("m.prb")).unwrap(), first);
    assert_eq!(json(&d.join("m.prb.run.json")), manifest);

    // Corpus generation is reproducible too.
    ok(d, &["synth", "--out", "again", "--n-phonemes", "6", "--dim", "8", "--n-speakers", "3", "--utterances-per-speaker", "8"]);
    for name in ["segmentation.tsv", "manifest.json", "spk1_u003.femb"] {
        assert_eq!(fs::read(d.join("corpus").join(name)).unwrap(), fs::read(d.join("again").join(name)).unwrap());
    }
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    fs::write(d.join("train.json"), r#"{"epochs": 2, "seed": 5, "learning_rate": 0.005, "hidden_dims": [8, 8, 8]}"#).unwrap();
    ok(
        d,
        &["train", "--dataset", "d.pds", "--out", "m.prb", "--config", "train.json", "--seed", "7"],
    );
    let m = json(&d.join("m.prb.run.json"));
    let s = &m["config"]["settings"];
    assert_eq!(s["epochs"], 2);
    assert_eq!(s["seed"], 7);
    assert_eq!(s["learning_rate"], 0.005);
    assert_eq!(s["batch_size"], 256);
    assert_eq!(m["config"]["probe"]["hidden_dims"], serde_json::json!([8, 8, 8]));
    assert_eq!(m["seed"], 7);

    fs::write(d.join("bad.json"), "{").unwrap();
    let out = triprobe(d, &["train", "--dataset", "d.pds", "--out", "m2.prb", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("InvalidConfig"));
}

#[test]
fn segment_averaged_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let summary = ok(
        d,
        &[
            "dataset", "--segmentation", "corpus/segmentation.tsv", "--manifest", "corpus/manifest.json",
            "--averaged", "--min-count", "5", "--out", "avg.pds",
        ],
    );
    assert_eq!(summary["kind"], "averaged");
    ok(d, &["train", "--dataset", "avg.pds", "--out", "avg.prb", "--epochs", "2", "--hidden", "8,8,8"]);
    let report = ok(d, &["eval", "--model", "avg.prb", "--dataset", "avg.pds", "--out", "avg.json"]);
    assert!(report["accuracy"].is_number());
    assert_eq!(report["n_examples"], summary["rows"]);

    // A single-head model cannot score frame triplets.
    let out = triprobe(d, &["eval", "--model", "avg.prb", "--dataset", "d.pds", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ArchitectureMismatch"));
}

#[test]
fn targets_restrict_the_inventory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    fs::write(d.join("targets.txt"), "ph00 ph01\nph02\n").unwrap();
    let summary = ok(
        d,
        &[
            "dataset", "--segmentation", "corpus/segmentation.tsv", "--manifest", "corpus/manifest.json",
            "--targets", "@targets.txt", "--min-count", "5", "--out", "t.pds",
        ],
    );
    assert_eq!(summary["classes"], 3);
    let out = triprobe(d, &["eval", "--model", "none.prb", "--dataset", "t.pds", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
}
