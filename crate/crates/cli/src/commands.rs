use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use ndarray::{s, Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use triprobe::annotations::{build_inventory, parse_segmentation, write_segmentation};
use triprobe::baseline::{expected_ordered_baseline, simulate_ordered_baseline, BaselineConfig};
use triprobe::decoder::{boundaries_json, decode_frames, export_track, locate_boundaries, sequence_ordered_accuracy};
use triprobe::embedio::{
    assemble_dataset, average_segments, parse_manifest, read_dataset, read_embeddings, speaker_split,
    truncate_to_embeddings, write_dataset, write_embeddings, write_manifest, EmbedError, EmbeddingFile,
    PackedDataset, SpeakerDataset,
};
use triprobe::framing::{
    filter_frames, label_corpus, parse_frame_labels, write_frame_labels, FrameKind, Triplet, DEFAULT_FRAME_MS,
};
use triprobe::metrics::{balanced_accuracy, confusion_ids, MetricsReport};
use triprobe::probe::{load_model, save_model, train_dataset, ProbeConfig, ProbeModel, TrainConfig};
use triprobe::synthgen::{generate, SynthConfig};

use crate::args::{
    BaselineArgs, Command, ConfusionArgs, DatasetArgs, DecodeArgs, EvalArgs, LabelArgs, Selection, SynthArgs,
    TrainArgs,
};
use crate::run::{sibling, Run};

const PREDICT_CHUNK: usize = 4096;

pub fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a, Run::new("synth", argv)),
        Command::Label(a) => label(&a, Run::new("label", argv)),
        Command::Dataset(a) => dataset(&a, Run::new("dataset", argv)),
        Command::Train(a) => train(&a, Run::new("train", argv)),
        Command::Eval(a) => eval(&a, Run::new("eval", argv)),
        Command::Confusion(a) => confusion(&a, Run::new("confusion", argv)),
        Command::Baseline(a) => baseline(&a, Run::new("baseline", argv)),
        Command::Decode(a) => decode(&a, Run::new("decode", argv)),
    }
}

fn print_summary(value: &serde_json::Value) {
    println!("{value}");
}

/// Defaults overlaid with the JSON config file, if any.
fn load_config<T: DeserializeOwned + Default>(run: &mut Run, path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = run.read(p)?;
            serde_json::from_slice(&bytes).map_err(|e| anyhow::anyhow!("InvalidConfig: {}: {e}", p.display()))
        }
    }
}

/// `a,b,c` or `@FILE` with whitespace- or comma-separated symbols.
fn parse_targets(run: &mut Run, list: &str) -> Result<BTreeSet<String>> {
    let text = match list.strip_prefix('@') {
        Some(path) => run.read_text(Path::new(path))?,
        None => list.to_string(),
    };
    let set: BTreeSet<String> =
        text.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(str::to_string).collect();
    if set.is_empty() {
        bail!("EmptyTargets: no target symbols in {list:?}");
    }
    Ok(set)
}

/// Manifest entries and their embedding files; relative paths resolve
/// against the manifest's directory.
fn load_embeddings(run: &mut Run, manifest: &Path) -> Result<(BTreeMap<String, String>, Vec<EmbeddingFile>)> {
    let entries = parse_manifest(&run.read_text(manifest)?)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut speakers = BTreeMap::new();
    let mut files = Vec::with_capacity(entries.len());
    for e in entries {
        let path = base.join(&e.file);
        let file = read_embeddings(&run.read(&path)?)?;
        if file.utt_id != e.utt_id {
            return Err(EmbedError::Manifest(format!(
                "{} holds utterance {}, manifest says {}",
                path.display(),
                file.utt_id,
                e.utt_id
            ))
            .into());
        }
        speakers.insert(e.utt_id, e.speaker_id);
        files.push(file);
    }
    Ok((speakers, files))
}

fn synth(a: &SynthArgs, mut run: Run) -> Result<()> {
    let mut cfg: SynthConfig = load_config(&mut run, a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_phonemes {
        cfg.n_phonemes = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.n_speakers {
        cfg.n_speakers = v;
    }
    if let Some(v) = a.utterances_per_speaker {
        cfg.utterances_per_speaker = v;
    }
    if let Some(v) = a.segments_per_utterance {
        cfg.segments_per_utterance = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.speaker_shift_sigma {
        cfg.speaker_shift_sigma = v;
    }
    let corpus = generate(&cfg)?;
    run.write(&a.out.join("segmentation.tsv"), write_segmentation(&corpus.annotations).as_bytes())?;
    run.write(&a.out.join("manifest.json"), write_manifest(&corpus.manifest()).as_bytes())?;
    let mut frames = 0;
    for (entry, file) in corpus.manifest().iter().zip(&corpus.embeddings) {
        run.write(&a.out.join(&entry.file), &write_embeddings(file))?;
        frames += file.n_frames();
    }
    run.finish(&a.out.join("run.json"), &cfg, Some(cfg.seed))?;
    print_summary(&json!({
        "utterances": corpus.annotations.len(),
        "frames": frames,
        "dim": 2 * cfg.dim,
        "out": a.out,
    }));
    Ok(())
}

fn label(a: &LabelArgs, mut run: Run) -> Result<()> {
    if a.frame_ms == 0 {
        bail!("InvalidConfig: frame_ms must be positive");
    }
    let anns = parse_segmentation(&run.read_text(&a.segmentation)?)?;
    let frames = label_corpus(&anns, a.frame_ms);
    run.write(&a.out, write_frame_labels(&frames).as_bytes())?;
    run.finish(&sibling(&a.out, ".run.json"), json!({ "frame_ms": a.frame_ms }), None)?;
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &frames {
        *kinds.entry(f.kind.as_str()).or_default() += 1;
    }
    print_summary(&json!({ "utterances": anns.len(), "frames": frames.len(), "kinds": kinds }));
    Ok(())
}

fn dataset(a: &DatasetArgs, mut run: Run) -> Result<()> {
    let anns = parse_segmentation(&run.read_text(&a.segmentation)?)?;
    let (speakers, files) = load_embeddings(&mut run, &a.manifest)?;
    let mut inventory = build_inventory(&anns, a.min_count)?;
    let targets = a.targets.as_deref().map(|t| parse_targets(&mut run, t)).transpose()?;
    if let Some(t) = &targets {
        inventory = inventory.restricted_to(t);
        if inventory.is_empty() {
            bail!("EmptyInventory: no target symbol occurs at least {} times", a.min_count);
        }
    }
    let packed: PackedDataset = if a.averaged {
        average_segments(&files, &anns, &inventory)?.into()
    } else {
        let frame_ms = files.first().map_or(DEFAULT_FRAME_MS, |f| f.frame_ms);
        let frames = match &a.labels {
            Some(path) => parse_frame_labels(&run.read_text(path)?)?
                .into_iter()
                .map(|row| {
                    let speaker = speakers
                        .get(&row.utt_id)
                        .ok_or_else(|| EmbedError::MissingUtterance(row.utt_id.clone()))?
                        .clone();
                    Ok(row.into_label_set(speaker, frame_ms))
                })
                .collect::<Result<Vec<_>, EmbedError>>()?,
            None => label_corpus(&anns, frame_ms),
        };
        let symbols: BTreeSet<String> = inventory.symbols().iter().cloned().collect();
        let frames = filter_frames(&frames, &symbols, !a.keep_two_border);
        let frames = truncate_to_embeddings(&frames, &files, a.truncate_tolerance);
        assemble_dataset(&files, &frames, &inventory)?.into()
    };
    run.write(&a.out, &write_dataset(&packed))?;
    let (rows, dim, kind) = match &packed {
        PackedDataset::Triplet(d) => (d.len(), d.dim(), "triplet"),
        PackedDataset::Averaged(d) => (d.len(), d.dim(), "averaged"),
    };
    let config = json!({
        "min_count": a.min_count,
        "targets": targets,
        "keep_two_border": a.keep_two_border,
        "averaged": a.averaged,
        "truncate_tolerance": a.truncate_tolerance,
        "inventory": inventory.symbols(),
    });
    run.finish(&sibling(&a.out, ".run.json"), config, None)?;
    print_summary(&json!({ "rows": rows, "dim": dim, "classes": inventory.len(), "kind": kind }));
    Ok(())
}

/// Optimizer settings plus the network shape, as read from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    #[serde(flatten)]
    optim: TrainConfig,
    hidden_dims: [usize; 3],
    dropout: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            optim: TrainConfig::default(),
            hidden_dims: ProbeConfig::DEFAULT_HIDDEN,
            dropout: ProbeConfig::DEFAULT_DROPOUT,
        }
    }
}

fn train(a: &TrainArgs, mut run: Run) -> Result<()> {
    let mut st: TrainSettings = load_config(&mut run, a.config.as_deref())?;
    if let Some(v) = a.seed {
        st.optim.seed = v;
    }
    if let Some(v) = a.epochs {
        st.optim.epochs = v;
    }
    if let Some(v) = a.batch_size {
        st.optim.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        st.optim.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        st.optim.weight_decay = v;
    }
    if let Some(v) = a.precision {
        st.optim.precision = v;
    }
    if let Some(v) = a.threads {
        st.optim.threads = v;
    }
    if let Some(v) = a.hidden {
        st.hidden_dims = v;
    }
    if let Some(v) = a.dropout {
        st.dropout = v;
    }
    let packed = read_dataset(&run.read(&a.dataset)?)?;
    let speakers: Option<BTreeSet<String>> = a.train_speakers.as_ref().map(|s| s.iter().cloned().collect());
    let outcome = match packed {
        PackedDataset::Triplet(d) => fit(&d, speakers.as_ref(), &st, 3)?,
        PackedDataset::Averaged(d) => fit(&d, speakers.as_ref(), &st, 1)?,
    };
    run.write(&a.out, &save_model(&outcome.model))?;
    let mut history = String::from("epoch,loss\n");
    for (i, loss) in outcome.loss_history.iter().enumerate() {
        history.push_str(&format!("{},{loss}\n", i + 1));
    }
    run.write(&sibling(&a.out, ".loss.csv"), history.as_bytes())?;
    let config = json!({ "settings": st, "probe": outcome.model.config, "train_speakers": speakers });
    run.finish(&sibling(&a.out, ".run.json"), config, Some(st.optim.seed))?;
    print_summary(&json!({
        "epochs": outcome.loss_history.len(),
        "final_loss": outcome.loss_history.last(),
        "params": outcome.model.params().n_params(),
    }));
    Ok(())
}

fn fit<D: SpeakerDataset>(
    data: &D,
    speakers: Option<&BTreeSet<String>>,
    st: &TrainSettings,
    heads: usize,
) -> Result<triprobe::probe::TrainOutcome> {
    let probe = ProbeConfig {
        input_dim: data.features().ncols(),
        hidden_dims: st.hidden_dims,
        n_classes: data.inventory().len(),
        dropout: st.dropout,
        heads,
    };
    Ok(match speakers {
        Some(s) => train_dataset(&speaker_split(data, s)?.0, &st.optim, &probe)?,
        None => train_dataset(data, &st.optim, &probe)?,
    })
}

fn predict_classes(model: &ProbeModel, x: ArrayView2<'_, f32>) -> Result<Array2<u32>> {
    let mut out = Array2::zeros((x.nrows(), model.heads()));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + PREDICT_CHUNK).min(x.nrows());
        let p = model.predict(x.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&p.classes);
        start = end;
    }
    Ok(out)
}

/// The model and the selected rows of the dataset.
fn load_for_scoring(run: &mut Run, model: &Path, dataset: &Path, sel: &Selection) -> Result<(ProbeModel, PackedDataset)> {
    let model = load_model(&run.read(model)?)?;
    let packed = read_dataset(&run.read(dataset)?)?;
    let inventory = match &packed {
        PackedDataset::Triplet(d) => &d.inventory,
        PackedDataset::Averaged(d) => &d.inventory,
    };
    if inventory.symbols() != model.inventory.symbols() {
        bail!("InventoryMismatch: model and dataset index different phoneme classes");
    }
    let targets = sel.targets.as_deref().map(|t| parse_targets(run, t)).transpose()?;
    let target_ids: Option<BTreeSet<u32>> = targets
        .map(|t| {
            t.iter()
                .map(|s| inventory.id_of(s).map(|i| i as u32).ok_or_else(|| EmbedError::UnknownSymbol(s.clone())))
                .collect::<Result<_, _>>()
        })
        .transpose()?;
    let speakers: Option<BTreeSet<&str>> = sel.speakers.as_ref().map(|s| s.iter().map(String::as_str).collect());
    let observed = match &packed {
        PackedDataset::Triplet(d) => d.speakers().into_iter().map(str::to_string).collect::<BTreeSet<_>>(),
        PackedDataset::Averaged(d) => d.speakers().into_iter().map(str::to_string).collect(),
    };
    if let Some(s) = speakers.iter().flatten().find(|s| !observed.contains(**s)) {
        return Err(EmbedError::UnknownSpeaker(s.to_string()).into());
    }
    let speaker_ok = |s: &str| speakers.as_ref().is_none_or(|set| set.contains(s));
    let target_ok = |c: &u32| target_ids.as_ref().is_none_or(|set| set.contains(c));
    let packed = match packed {
        PackedDataset::Triplet(d) => PackedDataset::Triplet(d.filter(|r| {
            speaker_ok(&r.speaker_id)
                && sel.kind.is_none_or(|k| k == r.kind)
                && r.label.as_array().into_iter().all(target_ok)
        })),
        PackedDataset::Averaged(d) => {
            if sel.kind.is_some() {
                bail!("InvalidSelection: --kind applies to frame datasets only");
            }
            let keep: Vec<usize> = (0..d.len())
                .filter(|&i| speaker_ok(&d.rows()[i].speaker_id) && target_ok(&d.rows()[i].label))
                .collect();
            PackedDataset::Averaged(d.select(&keep))
        }
    };
    Ok((model, packed))
}

/// Predicted and reference triplets; single-label data becomes uniform triplets.
type Scored = (Vec<Triplet<u32>>, Vec<Triplet<u32>>);

fn score(model: &ProbeModel, packed: &PackedDataset) -> Result<Scored> {
    let (features, truths, heads) = match packed {
        PackedDataset::Triplet(d) => (d.features(), d.labels(), 3),
        PackedDataset::Averaged(d) => (d.features(), d.labels().into_iter().map(Triplet::uniform).collect(), 1),
    };
    if model.heads() != heads {
        bail!("ArchitectureMismatch: model has {} head(s), dataset needs {heads}", model.heads());
    }
    let classes = predict_classes(model, features)?;
    let preds = classes
        .rows()
        .into_iter()
        .map(|r| if r.len() == 3 { Triplet::new(r[0], r[1], r[2]) } else { Triplet::uniform(r[0]) })
        .collect();
    Ok((preds, truths))
}

fn eval(a: &EvalArgs, mut run: Run) -> Result<()> {
    let (model, packed) = load_for_scoring(&mut run, &a.model, &a.dataset, &a.selection)?;
    let (preds, truths) = score(&model, &packed)?;
    let report = match &packed {
        PackedDataset::Triplet(_) => serde_json::to_value(MetricsReport::compute(&preds, &truths)?)?,
        PackedDataset::Averaged(d) => {
            let p: Vec<u32> = preds.iter().map(|t| t.start).collect();
            let t: Vec<u32> = truths.iter().map(|t| t.start).collect();
            let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
            if t.is_empty() {
                return Err(triprobe::MetricsError::Empty.into());
            }
            json!({
                "accuracy": hits as f64 / t.len() as f64,
                "balanced_accuracy": balanced_accuracy(&p, &t, &d.inventory).ok(),
                "n_examples": t.len(),
            })
        }
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    run.write(&a.out, text.as_bytes())?;
    run.finish(&sibling(&a.out, ".run.json"), selection_json(&a.selection), None)?;
    print_summary(&report);
    Ok(())
}

fn selection_json(sel: &Selection) -> serde_json::Value {
    json!({
        "speakers": sel.speakers,
        "targets": sel.targets,
        "kind": sel.kind.map(FrameKind::as_str),
    })
}

fn confusion(a: &ConfusionArgs, mut run: Run) -> Result<()> {
    let (model, packed) = load_for_scoring(&mut run, &a.model, &a.dataset, &a.selection)?;
    let (preds, truths) = score(&model, &packed)?;
    let matrix = confusion_ids(&preds, &truths, a.position, &model.inventory)?;
    run.write(&a.out, matrix.to_csv(a.normalize).as_bytes())?;
    let mut config = selection_json(&a.selection);
    config["position"] = json!(a.position);
    config["normalize"] = json!(a.normalize);
    run.finish(&sibling(&a.out, ".run.json"), config, None)?;
    print_summary(&json!({
        "position": a.position,
        "n_examples": matrix.n_examples(),
        "correct": matrix.trace(),
    }));
    Ok(())
}

fn baseline(a: &BaselineArgs, mut run: Run) -> Result<()> {
    let mut cfg: BaselineConfig = load_config(&mut run, a.config.as_deref())?;
    if let Some(v) = a.p {
        cfg.p_identify = v;
    }
    if let Some(v) = a.protocol {
        cfg.protocol = v;
    }
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let rows = parse_frame_labels(&run.read_text(&a.labels)?)?;
    let truths: Vec<Triplet<String>> = rows
        .into_iter()
        .filter(|r| match a.kind {
            Some(k) => r.kind == k,
            None => a.keep_two_border || r.kind != FrameKind::TwoBorder,
        })
        .map(|r| r.triplet)
        .collect();
    let expected = expected_ordered_baseline(&truths, &cfg)?;
    let sim = simulate_ordered_baseline(&truths, &cfg)?;
    let out = json!({
        "protocol": cfg.protocol,
        "p": cfg.p_identify,
        "expected": expected,
        "simulated": sim.mean,
        "stderr": sim.stderr,
        "trials": cfg.trials,
        "n_frames": truths.len(),
    });
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    run.write(&a.out, text.as_bytes())?;
    let config = json!({ "baseline": cfg, "kind": a.kind.map(FrameKind::as_str), "keep_two_border": a.keep_two_border });
    run.finish(&sibling(&a.out, ".run.json"), config, Some(cfg.seed))?;
    print_summary(&out);
    Ok(())
}

fn decode(a: &DecodeArgs, mut run: Run) -> Result<()> {
    let model = load_model(&run.read(&a.model)?)?;
    let emb = read_embeddings(&run.read(&a.embeddings)?)?;
    let targets = a.targets.as_deref().map(|t| parse_targets(&mut run, t)).transpose()?;
    let decodes = decode_frames(&model, &emb)?;
    let events = locate_boundaries(&decodes, emb.frame_ms)?;
    let out = |name: &str| -> PathBuf { a.out.join(name) };
    run.write(&out("track.csv"), export_track(&decodes, &model.inventory, targets.as_ref()).as_bytes())?;
    run.write(&out("boundaries.json"), format!("{}\n", boundaries_json(&events)).as_bytes())?;
    let mut summary = json!({ "utt_id": emb.utt_id, "frames": decodes.len(), "boundaries": events.len() });
    if let Some(path) = &a.reference {
        let anns = parse_segmentation(&run.read_text(path)?)?;
        let Some(reference) = anns.iter().find(|u| u.utt_id == emb.utt_id) else {
            return Err(EmbedError::MissingUtterance(emb.utt_id.clone()).into());
        };
        let acc = sequence_ordered_accuracy(&decodes, reference, emb.frame_ms)?;
        summary["ordered_accuracy"] = json!(acc);
        let text = format!("{}\n", serde_json::to_string_pretty(&summary)?);
        run.write(&out("accuracy.json"), text.as_bytes())?;
    }
    run.finish(&out("run.json"), json!({ "targets": targets }), None)?;
    print_summary(&summary);
    Ok(())
}
