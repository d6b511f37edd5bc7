//! AdamW with decoupled weight decay. Bias vectors are never decayed.

use serde::{Deserialize, Serialize};

use super::network::{Network, Real};

/// Optimizer hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Applies one AdamW update to a flat parameter block in place.
///
/// `step` is the 1-based step number used for bias correction.
pub fn adamw_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    assert!(step >= 1, "steps are 1-based");
    assert!(params.len() == grads.len() && params.len() == first.len() && params.len() == second.len());
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.eps));
    let wd = if decay { T::of(cfg.weight_decay) } else { T::zero() };
    for i in 0..params.len() {
        let g = grads[i];
        first[i] = b1 * first[i] + (T::one() - b1) * g;
        second[i] = b2 * second[i] + (T::one() - b2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] = params[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * params[i]);
    }
}

/// First and second moment accumulators mirroring a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Network<T>,
    pub second: Network<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self { first: net.zeros_like(), second: net.zeros_like(), step: 0 }
    }

    /// Advances the step counter and updates every layer of `net`.
    pub fn apply(&mut self, net: &mut Network<T>, grads: &Network<T>, cfg: &AdamWConfig) {
        self.step += 1;
        let layers = net
            .layers_mut()
            .zip(grads.layers())
            .zip(self.first.layers_mut().zip(self.second.layers_mut()));
        for ((p, g), (m, v)) in layers {
            adamw_update(
                p.weight.as_slice_mut().expect("standard layout"),
                g.weight.as_slice().expect("standard layout"),
                m.weight.as_slice_mut().expect("standard layout"),
                v.weight.as_slice_mut().expect("standard layout"),
                self.step,
                cfg,
                true,
            );
            adamw_update(
                p.bias.as_slice_mut().expect("contiguous"),
                g.bias.as_slice().expect("contiguous"),
                m.bias.as_slice_mut().expect("contiguous"),
                v.bias.as_slice_mut().expect("contiguous"),
                self.step,
                cfg,
                false,
            );
        }
    }
}
