//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triprobe::synthgen::{generate, SynthConfig};
use triprobe::{Triplet, UtteranceAnnotation};

/// Uniform features in [-1, 1) and class targets for `heads` heads.
pub fn random_batch(rows: usize, dim: usize, classes: usize, heads: usize, seed: u64) -> (Array2<f32>, Array2<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-1.0f32..1.0));
    let t = Array2::from_shape_simple_fn((rows, heads), || rng.random_range(0..classes as u32));
    (x, t)
}

/// Prediction and reference triplets where each reference has a
/// two-symbol, border-like shape and predictions are right about half the time.
pub fn triplet_pairs(n: usize, classes: u32, seed: u64) -> (Vec<Triplet<u32>>, Vec<Triplet<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random_range(0..classes);
        let b = rng.random_range(0..classes);
        let t = if rng.random_bool(0.5) { Triplet::new(a, a, b) } else { Triplet::new(a, b, b) };
        let p = if rng.random_bool(0.5) { t } else { Triplet::new(t.end, t.centre, t.start) };
        truths.push(t);
        preds.push(p);
    }
    (preds, truths)
}

/// Annotations of a synthetic corpus with `utterances` utterances.
pub fn annotations(utterances: usize) -> Vec<UtteranceAnnotation> {
    let cfg = SynthConfig { n_speakers: 1, utterances_per_speaker: utterances, dim: 4, ..SynthConfig::default() };
    generate(&cfg).expect("valid config").annotations
}
