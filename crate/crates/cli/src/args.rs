use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use triprobe::{FrameKind, Position, Precision, Protocol};

#[derive(Debug, Parser)]
#[command(name = "triprobe", version, about = "Probe frame embeddings for phoneme identity and order")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: segmentation TSV, manifest and FEMB files.
    Synth(SynthArgs),
    /// Label 20 ms frames of a segmentation with start/centre/end triplets.
    Label(LabelArgs),
    /// Pair frame labels with embeddings into a packed dataset.
    Dataset(DatasetArgs),
    /// Train a probe on a packed dataset.
    Train(TrainArgs),
    /// Score a probe on a packed dataset.
    Eval(EvalArgs),
    /// Per-position confusion matrix as CSV.
    Confusion(ConfusionArgs),
    /// Random-order chance level for a set of frame labels.
    Baseline(BaselineArgs),
    /// Decode one utterance into probability tracks and boundary estimates.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_phonemes: Option<usize>,
    /// Prototype dimension (frames get twice as many components).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_speakers: Option<usize>,
    #[arg(long)]
    pub utterances_per_speaker: Option<usize>,
    #[arg(long)]
    pub segments_per_utterance: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub speaker_shift_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Segmentation TSV.
    #[arg(long)]
    pub segmentation: PathBuf,
    /// Frame label TSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub frame_ms: u32,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Segmentation TSV; defines the phoneme inventory.
    #[arg(long)]
    pub segmentation: PathBuf,
    /// Embedding manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Frame label TSV. Frames are labelled from the segmentation when omitted.
    #[arg(long, conflicts_with = "averaged")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum segment count for a symbol to enter the inventory.
    #[arg(long, default_value_t = 50)]
    pub min_count: usize,
    /// Target symbols, comma separated, or @FILE.
    #[arg(long)]
    pub targets: Option<String>,
    /// Keep frames that contain two boundaries.
    #[arg(long)]
    pub keep_two_border: bool,
    /// One mean embedding per segment instead of per-frame triplets.
    #[arg(long)]
    pub averaged: bool,
    /// Labelled frames this far past the end of an embedding file are dropped.
    #[arg(long, default_value_t = 1)]
    pub truncate_tolerance: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Model file to write; the loss history goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Train only on these speakers.
    #[arg(long, value_delimiter = ',')]
    pub train_speakers: Option<Vec<String>>,
    /// JSON file with optimizer and network settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Hidden layer widths, e.g. 512,512,512.
    #[arg(long, value_parser = parse_hidden)]
    pub hidden: Option<[usize; 3]>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct Selection {
    /// Restrict to these speakers.
    #[arg(long, value_delimiter = ',')]
    pub speakers: Option<Vec<String>>,
    /// Restrict to examples whose symbols are all targets (comma separated or @FILE).
    #[arg(long)]
    pub targets: Option<String>,
    /// Restrict to one frame kind.
    #[arg(long)]
    pub kind: Option<FrameKind>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub selection: Selection,
}

#[derive(Debug, Args)]
pub struct ConfusionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "centre")]
    pub position: Position,
    #[arg(long)]
    pub out: PathBuf,
    /// Write row-normalized proportions instead of counts.
    #[arg(long)]
    pub normalize: bool,
    #[command(flatten)]
    pub selection: Selection,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Frame label TSV.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Probability of identifying a phoneme.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kind: Option<FrameKind>,
    #[arg(long)]
    pub keep_two_border: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// FEMB file of one utterance.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Segmentation TSV holding the utterance, for ordered accuracy.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Output directory for track.csv, boundaries.json and accuracy.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Only export tracks for these symbols (comma separated or @FILE).
    #[arg(long)]
    pub targets: Option<String>,
}

fn parse_hidden(s: &str) -> Result<[usize; 3], String> {
    let widths: Vec<usize> = s
        .split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|e| format!("{w:?}: {e}")))
        .collect::<Result<_, _>>()?;
    widths.try_into().map_err(|w: Vec<usize>| format!("expected three widths, found {}", w.len()))
}
