//! The trainable probe: a three-layer ReLU trunk shared by one linear head
//! per predicted position (start, centre, end), trained with the summed
//! cross-entropy of the heads under AdamW. A single-head variant classifies
//! segment-averaged embeddings.

pub mod adamw;
mod io;
pub mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::PhonemeInventory;
use crate::framing::{Triplet, TripletLabel};

pub use adamw::{adamw_update, AdamWConfig, OptimizerState};
pub use io::{load_model, save_model, MODEL_MAGIC};
pub use network::{Dense, Network, Real};
pub use train::{train, train_averaged, train_dataset, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("ShapeMismatch: expected {expected} columns, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("NonFiniteActivation: the forward pass produced a non-finite logit")]
    NonFiniteActivation,
    #[error("TargetOutOfRange: class id {target} with {n_classes} classes")]
    TargetOutOfRange { target: usize, n_classes: usize },
    #[error("EmptyDataset: training set has no examples")]
    EmptyDataset,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("BadMagic: not a probe model file")]
    BadMagic,
    #[error("TruncatedPayload: need {needed} bytes, found {found}")]
    TruncatedPayload { needed: usize, found: usize },
    #[error("ArchitectureMismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("NonFiniteParameter: model contains a non-finite parameter")]
    NonFiniteParameter,
}

/// Probe architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub input_dim: usize,
    pub hidden_dims: [usize; 3],
    pub n_classes: usize,
    pub dropout: f64,
    pub heads: usize,
}

impl ProbeConfig {
    pub const DEFAULT_HIDDEN: [usize; 3] = [512, 512, 512];
    pub const DEFAULT_DROPOUT: f64 = 0.1;

    /// Three-head probe with default widths and dropout.
    pub fn triplet(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Self::DEFAULT_HIDDEN,
            n_classes,
            dropout: Self::DEFAULT_DROPOUT,
            heads: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.into()));
        if self.input_dim == 0 || self.n_classes == 0 || self.hidden_dims.contains(&0) {
            return bad("dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.heads != 1 && self.heads != 3 {
            return bad("heads must be 1 or 3");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("unknown precision {other:?} (expected single or double)")),
        }
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Workers for batch gradients. Results are deterministic for a given count.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 20,
            seed: 0,
            precision: Precision::Single,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        Ok(())
    }
}

/// A trained (or initialized) probe together with the inventory its classes index.
///
/// Parameters are held in `f64`; a single-precision model holds values that
/// are exactly representable in `f32` and is evaluated in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    pub precision: Precision,
    pub inventory: PhonemeInventory,
    params: Network<f64>,
}

/// Per-head class probabilities and argmax class ids for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// One `batch × n_classes` block per head.
    pub probabilities: Vec<Array2<f64>>,
    /// `batch × heads` argmax class ids (ties resolved to the lowest id).
    pub classes: Array2<u32>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.classes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Argmax triplets of a three-head prediction.
    pub fn class_triplets(&self) -> Vec<Triplet<u32>> {
        assert_eq!(self.classes.ncols(), 3, "triplet view needs three heads");
        self.classes.rows().into_iter().map(|r| Triplet::new(r[0], r[1], r[2])).collect()
    }

    pub fn label_triplets(&self, inventory: &PhonemeInventory) -> Vec<TripletLabel> {
        self.class_triplets()
            .iter()
            .map(|t| t.map(|&c| inventory.symbol(c as usize).unwrap_or("?").to_string()))
            .collect()
    }
}

impl ProbeModel {
    fn check(config: &ProbeConfig, inventory: &PhonemeInventory) -> Result<(), ProbeError> {
        config.validate()?;
        if inventory.len() != config.n_classes {
            return Err(ProbeError::ArchitectureMismatch(format!(
                "{} inventory symbols for {} classes",
                inventory.len(),
                config.n_classes
            )));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(config: ProbeConfig, inventory: PhonemeInventory, precision: Precision) -> Result<Self, ProbeError> {
        Self::check(&config, &inventory)?;
        let params = Network::zeros(&config);
        Ok(Self { config, precision, inventory, params })
    }

    pub fn from_network<T: Real>(
        config: ProbeConfig,
        inventory: PhonemeInventory,
        precision: Precision,
        net: &Network<T>,
    ) -> Result<Self, ProbeError> {
        Self::check(&config, &inventory)?;
        let expected = Network::<f64>::zeros(&config);
        let shapes_match = expected.layers().count() == net.layers().count()
            && expected.layers().zip(net.layers()).all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len());
        if !shapes_match {
            return Err(ProbeError::ArchitectureMismatch("layer shapes do not match the configuration".into()));
        }
        let mut params: Network<f64> = net.cast();
        if precision == Precision::Single {
            params = params.cast::<f32>().cast();
        }
        if !params.all_finite() {
            return Err(ProbeError::NonFiniteParameter);
        }
        Ok(Self { config, precision, inventory, params })
    }

    pub fn params(&self) -> &Network<f64> {
        &self.params
    }

    pub fn network<T: Real>(&self) -> Network<T> {
        self.params.cast()
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    /// Per-head logits. With `training` set, inverted dropout is drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f32>,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Array2<f64>>, ProbeError> {
        match self.precision {
            Precision::Single => self.forward_in::<f32, R>(x, training, rng),
            Precision::Double => self.forward_in::<f64, R>(x, training, rng),
        }
    }

    fn forward_in<T: Real, R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f32>,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Array2<f64>>, ProbeError> {
        let net = self.network::<T>();
        let xt = x.mapv(|v| T::of(v as f64));
        let masks = (training && self.config.dropout > 0.0)
            .then(|| network::dropout_masks(&net, x.nrows(), self.config.dropout, rng));
        let logits = network::forward(&net, xt.view(), masks.as_deref())?;
        Ok(logits.into_iter().map(|l| l.mapv(T::widen)).collect())
    }

    /// Class probabilities and argmax per head, in inference mode.
    pub fn predict(&self, x: ArrayView2<'_, f32>) -> Result<Prediction, ProbeError> {
        match self.precision {
            Precision::Single => self.predict_in::<f32>(x),
            Precision::Double => self.predict_in::<f64>(x),
        }
    }

    fn predict_in<T: Real>(&self, x: ArrayView2<'_, f32>) -> Result<Prediction, ProbeError> {
        let net = self.network::<T>();
        let xt = x.mapv(|v| T::of(v as f64));
        let logits = network::forward(&net, xt.view(), None)?;
        let mut classes = Array2::<u32>::zeros((x.nrows(), logits.len()));
        let mut probabilities = Vec::with_capacity(logits.len());
        for (h, l) in logits.iter().enumerate() {
            let p = network::softmax(l.view());
            for (i, row) in p.rows().into_iter().enumerate() {
                classes[[i, h]] = network::argmax(row) as u32;
            }
            probabilities.push(p.mapv(T::widen));
        }
        Ok(Prediction { probabilities, classes })
    }
}
