//! Random-order chance baselines for ordered accuracy.
//!
//! A hypothetical model identifies the phonemes present in a frame with some
//! probability and then emits them in a random arrangement. Two readings of
//! "identify" are supported:
//!
//! * [`Protocol::PerPosition`]: each of the three positions is identified
//!   independently with probability `p`; when all three are, the true multiset
//!   is emitted in a uniformly random arrangement. A frame scores `p³ / A`,
//!   where `A` is the number of distinct arrangements of its multiset.
//! * [`Protocol::PerSet`]: each distinct symbol is identified with probability
//!   `p`; when all `k` are, a 3-tuple that uses every identified symbol is drawn
//!   uniformly. A frame scores `pᵏ / C` with `C` = 1, 6, 6 for `k` = 1, 2, 3.
//!
//! Unidentified frames score zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing::Triplet;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BaselineError {
    #[error("Empty: no reference triplets")]
    Empty,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("LengthMismatch: {preds} predictions for {truths} references")]
    LengthMismatch { preds: usize, truths: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Protocol {
    #[default]
    PerPosition,
    PerSet,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::PerPosition => "PerPosition",
            Protocol::PerSet => "PerSet",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "perposition" => Ok(Protocol::PerPosition),
            "perset" => Ok(Protocol::PerSet),
            _ => Err(format!("unknown protocol {s:?} (expected per-position or per-set)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub p_identify: f64,
    pub protocol: Protocol,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { p_identify: 0.9, protocol: Protocol::PerPosition, trials: 10_000, seed: 0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(0.0..=1.0).contains(&self.p_identify) {
            return Err(BaselineError::InvalidConfig("p_identify must lie in [0, 1]".into()));
        }
        if self.trials == 0 {
            return Err(BaselineError::InvalidConfig("trials must be at least 1".into()));
        }
        Ok(())
    }
}

fn distinct<T: PartialEq>(t: &Triplet<T>) -> usize {
    let [a, b, c] = t.as_array();
    1 + usize::from(b != a) + usize::from(c != a && c != b)
}

/// Distinct arrangements of the triplet's multiset: 1, 3 or 6.
pub fn arrangements<T: PartialEq>(t: &Triplet<T>) -> u32 {
    match distinct(t) {
        1 => 1,
        2 => 3,
        _ => 6,
    }
}

/// Surjective 3-tuples over the triplet's distinct symbols: 1, 6 or 6.
pub fn surjective_tuples<T: PartialEq>(t: &Triplet<T>) -> u32 {
    match distinct(t) {
        1 => 1,
        _ => 6,
    }
}

/// Expected ordered accuracy of one frame.
pub fn expected_for<T: PartialEq>(t: &Triplet<T>, p: f64, protocol: Protocol) -> f64 {
    match protocol {
        Protocol::PerPosition => p.powi(3) / arrangements(t) as f64,
        Protocol::PerSet => p.powi(distinct(t) as i32) / surjective_tuples(t) as f64,
    }
}

pub fn expected_ordered_baseline<T: PartialEq>(truths: &[Triplet<T>], cfg: &BaselineConfig) -> Result<f64, BaselineError> {
    if truths.is_empty() {
        return Err(BaselineError::Empty);
    }
    cfg.validate()?;
    let total: f64 = truths.iter().map(|t| expected_for(t, cfg.p_identify, cfg.protocol)).sum();
    Ok(total / truths.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn simulate_one<T: PartialEq, R: Rng>(t: &Triplet<T>, p: f64, protocol: Protocol, rng: &mut R) -> bool {
    let items = t.as_array();
    match protocol {
        Protocol::PerPosition => {
            if !(0..3).all(|_| rng.random_bool(p)) {
                return false;
            }
            let perm = PERMUTATIONS[rng.random_range(0..6)];
            (0..3).all(|i| items[perm[i]] == items[i])
        }
        Protocol::PerSet => {
            let mut symbols: Vec<&T> = Vec::with_capacity(3);
            for x in items {
                if !symbols.contains(&x) {
                    symbols.push(x);
                }
            }
            if !symbols.iter().all(|_| rng.random_bool(p)) {
                return false;
            }
            let k = symbols.len();
            loop {
                let draw = [rng.random_range(0..k), rng.random_range(0..k), rng.random_range(0..k)];
                if (0..k).all(|s| draw.contains(&s)) {
                    return (0..3).all(|i| symbols[draw[i]] == items[i]);
                }
            }
        }
    }
}

/// Monte Carlo estimate: `trials` independent passes over `truths`; returns
/// the mean per-pass ordered accuracy and its standard error. Pass `i` draws
/// from its own stream of the seeded generator.
pub fn simulate_ordered_baseline<T: PartialEq>(truths: &[Triplet<T>], cfg: &BaselineConfig) -> Result<Estimate, BaselineError> {
    if truths.is_empty() {
        return Err(BaselineError::Empty);
    }
    cfg.validate()?;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for pass in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(pass as u64);
        let hits = truths.iter().filter(|t| simulate_one(t, cfg.p_identify, cfg.protocol, &mut rng)).count();
        let acc = hits as f64 / truths.len() as f64;
        sum += acc;
        sum_sq += acc * acc;
    }
    let n = cfg.trials as f64;
    let mean = sum / n;
    let stderr = if cfg.trials > 1 {
        ((sum_sq - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(Estimate { mean, stderr })
}

/// Chance level of ordered accuracy for predictions that carry no
/// information about the references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceLevel {
    /// `Σ_τ π(τ) · w(τ)` over distinct triplets `τ`, where `π` and `w` are
    /// the predicted and reference triplet frequencies.
    pub level: f64,
    /// Standard deviation if every example were an independent trial.
    pub sigma_examples: f64,
    /// Standard deviation if each reference class is mapped, as a block, to a
    /// prediction drawn from `π`: `sqrt(Σ_τ w(τ)² π(τ)(1 − π(τ)))`. A probe
    /// responds alike to examples of one class, so this is the relevant
    /// spread for a trained model.
    pub sigma_classes: f64,
}

pub fn independence_chance_level<T: Ord + Clone>(
    preds: &[Triplet<T>],
    truths: &[Triplet<T>],
) -> Result<ChanceLevel, BaselineError> {
    if truths.is_empty() || preds.is_empty() {
        return Err(BaselineError::Empty);
    }
    if preds.len() != truths.len() {
        return Err(BaselineError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    let key = |t: &Triplet<T>| (t.start.clone(), t.centre.clone(), t.end.clone());
    let n = truths.len() as f64;
    let mut pred_freq = BTreeMap::new();
    for t in preds {
        *pred_freq.entry(key(t)).or_insert(0.0) += 1.0 / n;
    }
    let mut true_freq = BTreeMap::new();
    for t in truths {
        *true_freq.entry(key(t)).or_insert(0.0) += 1.0 / n;
    }
    let (mut level, mut var_classes) = (0.0, 0.0);
    for (k, &w) in &true_freq {
        let pi: f64 = pred_freq.get(k).copied().unwrap_or(0.0);
        level += pi * w;
        var_classes += w * w * pi * (1.0 - pi);
    }
    Ok(ChanceLevel {
        level,
        sigma_examples: (level * (1.0 - level) / n).sqrt(),
        sigma_classes: var_classes.sqrt(),
    })
}
