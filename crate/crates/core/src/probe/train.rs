use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{self, Network, Real};
use super::{OptimizerState, Precision, ProbeConfig, ProbeError, ProbeModel, TrainConfig};
use crate::annotations::PhonemeInventory;
use crate::embedio::{ProbeDataset, SegmentAveragedDataset, SpeakerDataset};

/// A trained model and the mean training loss of each epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProbeModel,
    pub loss_history: Vec<f64>,
}

/// Trains a three-head probe on frame triplets.
pub fn train(dataset: &ProbeDataset, cfg: &TrainConfig, probe: &ProbeConfig) -> Result<TrainOutcome, ProbeError> {
    train_dataset(dataset, cfg, probe)
}

/// Trains a single-head probe on segment-averaged embeddings.
pub fn train_averaged(
    dataset: &SegmentAveragedDataset,
    cfg: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<TrainOutcome, ProbeError> {
    train_dataset(dataset, cfg, probe)
}

pub fn train_dataset<D: SpeakerDataset>(
    dataset: &D,
    cfg: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<TrainOutcome, ProbeError> {
    if dataset.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    cfg.validate()?;
    probe.validate()?;
    let targets = dataset.targets();
    if targets.ncols() != probe.heads {
        return Err(ProbeError::InvalidConfig(format!(
            "dataset has {} label columns, probe has {} heads",
            targets.ncols(),
            probe.heads
        )));
    }
    let features = dataset.features();
    if features.ncols() != probe.input_dim {
        return Err(ProbeError::ShapeMismatch { expected: probe.input_dim, found: features.ncols() });
    }
    let inventory = dataset.inventory().clone();
    match cfg.precision {
        Precision::Single => run::<f32>(features, targets, inventory, cfg, probe),
        Precision::Double => run::<f64>(features, targets, inventory, cfg, probe),
    }
}

fn run<T: Real>(
    features: ArrayView2<'_, f32>,
    targets: Array2<u32>,
    inventory: PhonemeInventory,
    cfg: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<TrainOutcome, ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::glorot(probe, &mut rng);
    let mut state = OptimizerState::new(&net);
    let opt = cfg.optimizer();
    let x_all = features.mapv(|v| T::of(v as f64));
    let n = x_all.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x_all.select(Axis(0), batch);
            let tb = targets.select(Axis(0), batch);
            let masks = (probe.dropout > 0.0)
                .then(|| network::dropout_masks(&net, batch.len(), probe.dropout, &mut rng));
            let (loss, grads) = network::batch_gradients(&net, xb.view(), tb.view(), masks.as_deref(), cfg.threads)?;
            state.apply(&mut net, &grads, &opt);
            total += loss.widen() * batch.len() as f64;
        }
        history.push(total / n as f64);
    }
    if !net.all_finite() {
        return Err(ProbeError::NonFiniteParameter);
    }
    let model = ProbeModel::from_network(probe.clone(), inventory, cfg.precision, &net)?;
    Ok(TrainOutcome { model, loss_history: history })
}
