//! Dense trunk with per-position heads: forward pass, summed cross-entropy
//! and reverse-mode gradients.
//!
//! Weight matrices are stored `out × in`, so a layer computes
//! `z = x · Wᵀ + b` on a row-major batch `x`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign};

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;
use rand::Rng;

use super::{ProbeConfig, ProbeError};

/// Floating-point types the probe can be evaluated in.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn widen(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `out × in`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || T::of(rng.random_range(-limit..limit)));
        Self { weight, bias: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// Three hidden layers followed by one head per predicted position.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub trunk: Vec<Dense<T>>,
    pub heads: Vec<Dense<T>>,
}

impl<T: Real> Network<T> {
    pub fn zeros(cfg: &ProbeConfig) -> Self {
        Self::build(cfg, Dense::zeros)
    }

    pub fn glorot<R: Rng + ?Sized>(cfg: &ProbeConfig, rng: &mut R) -> Self {
        Self::build(cfg, |i, o| Dense::glorot(i, o, rng))
    }

    fn build(cfg: &ProbeConfig, mut layer: impl FnMut(usize, usize) -> Dense<T>) -> Self {
        let mut trunk = Vec::with_capacity(3);
        let mut width = cfg.input_dim;
        for &h in &cfg.hidden_dims {
            trunk.push(layer(width, h));
            width = h;
        }
        let heads = (0..cfg.heads).map(|_| layer(width, cfg.n_classes)).collect();
        Self { trunk, heads }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.heads[0].output_dim()
    }

    /// Trunk layers followed by heads, in storage order.
    pub fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.trunk.iter().chain(&self.heads)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.trunk.iter_mut().chain(&mut self.heads)
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |l: &Dense<T>| Dense {
            weight: l.weight.mapv(|v| U::of(v.widen())),
            bias: l.bias.mapv(|v| U::of(v.widen())),
        };
        Network { trunk: self.trunk.iter().map(conv).collect(), heads: self.heads.iter().map(conv).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Dense<T>| Dense { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) };
        Network { trunk: self.trunk.iter().map(z).collect(), heads: self.heads.iter().map(z).collect() }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened parameters in storage order (weights row-major, then bias, per layer).
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in self.layers() {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Overwrites parameters from a flat slice in storage order.
    pub fn set_flat(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.n_params(), "parameter count");
        let mut it = values.iter().copied();
        for l in self.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
    }
}

/// Inverted-dropout masks for the three hidden layers: each entry is either
/// 0 or `1 / (1 - p)`.
pub fn dropout_masks<T: Real, R: Rng + ?Sized>(
    net: &Network<T>,
    batch: usize,
    p: f64,
    rng: &mut R,
) -> Vec<Array2<T>> {
    let keep = 1.0 - p;
    let scale = T::of(1.0 / keep);
    net.trunk
        .iter()
        .map(|l| {
            Array2::from_shape_simple_fn((batch, l.output_dim()), || {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
        })
        .collect()
}

/// Intermediate values kept for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    /// Input of each trunk layer, followed by the final hidden representation.
    pub activations: Vec<Array2<T>>,
    /// Pre-activation of each trunk layer.
    pub pre: Vec<Array2<T>>,
}

fn check_input<T: Real>(net: &Network<T>, x: &ArrayView2<'_, T>) -> Result<(), ProbeError> {
    if x.ncols() != net.input_dim() {
        return Err(ProbeError::ShapeMismatch { expected: net.input_dim(), found: x.ncols() });
    }
    Ok(())
}

/// Runs the network; `masks` (from [`dropout_masks`]) enables training-mode
/// dropout. Returns one `batch × n_classes` logit block per head.
pub fn forward_cached<T: Real>(
    net: &Network<T>,
    x: ArrayView2<'_, T>,
    masks: Option<&[Array2<T>]>,
) -> Result<(Vec<Array2<T>>, ForwardCache<T>), ProbeError> {
    check_input(net, &x)?;
    let mut activations = Vec::with_capacity(4);
    let mut pre = Vec::with_capacity(3);
    let mut h = x.to_owned();
    for (i, layer) in net.trunk.iter().enumerate() {
        let z = layer.apply(h.view());
        let mut a = z.mapv(|v| v.max(T::zero()));
        if let Some(m) = masks {
            a *= &m[i];
        }
        activations.push(h);
        pre.push(z);
        h = a;
    }
    let logits: Vec<Array2<T>> = net.heads.iter().map(|head| head.apply(h.view())).collect();
    activations.push(h);
    if logits.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
        return Err(ProbeError::NonFiniteActivation);
    }
    Ok((logits, ForwardCache { activations, pre }))
}

pub fn forward<T: Real>(
    net: &Network<T>,
    x: ArrayView2<'_, T>,
    masks: Option<&[Array2<T>]>,
) -> Result<Vec<Array2<T>>, ProbeError> {
    forward_cached(net, x, masks).map(|(l, _)| l)
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    log_softmax(logits).mapv(T::exp)
}

fn check_targets(targets: &ArrayView2<'_, u32>, heads: usize, batch: usize, n_classes: usize) -> Result<(), ProbeError> {
    if targets.ncols() != heads || targets.nrows() != batch {
        return Err(ProbeError::ShapeMismatch { expected: heads, found: targets.ncols() });
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= n_classes) {
        return Err(ProbeError::TargetOutOfRange { target: t as usize, n_classes });
    }
    Ok(())
}

/// Batch mean of the per-example sum of head cross-entropies.
/// `targets` is `batch × heads`.
pub fn triplet_loss<T: Real>(logits: &[Array2<T>], targets: ArrayView2<'_, u32>) -> Result<T, ProbeError> {
    let batch = logits.first().map_or(0, |l| l.nrows());
    let n_classes = logits.first().map_or(0, |l| l.ncols());
    check_targets(&targets, logits.len(), batch, n_classes)?;
    if batch == 0 {
        return Ok(T::zero());
    }
    Ok(summed_cross_entropy(logits, targets) / T::of(batch as f64))
}

fn summed_cross_entropy<T: Real>(logits: &[Array2<T>], targets: ArrayView2<'_, u32>) -> T {
    let mut total = T::zero();
    for (h, l) in logits.iter().enumerate() {
        let ls = log_softmax(l.view());
        for (i, row) in ls.rows().into_iter().enumerate() {
            total = total - row[targets[[i, h]] as usize];
        }
    }
    total
}

/// Loss and parameter gradients for one batch. `scale` multiplies the
/// per-example gradients; `1 / batch` gives the mean-reduced gradient.
/// Returns the unscaled summed loss so that partial batches can be combined.
pub fn loss_and_gradients_scaled<T: Real>(
    net: &Network<T>,
    x: ArrayView2<'_, T>,
    targets: ArrayView2<'_, u32>,
    masks: Option<&[Array2<T>]>,
    scale: T,
) -> Result<(T, Network<T>), ProbeError> {
    let (logits, cache) = forward_cached(net, x, masks)?;
    check_targets(&targets, net.heads.len(), x.nrows(), net.n_classes())?;
    let loss_sum = summed_cross_entropy(&logits, targets);

    let hidden = cache.activations.last().expect("final hidden");
    let mut grads = net.zeros_like();
    let mut d_hidden = Array2::<T>::zeros(hidden.raw_dim());
    for (h, (head, logit)) in net.heads.iter().zip(&logits).enumerate() {
        // d CE / d z = softmax(z) − onehot(target)
        let mut dz = softmax(logit.view());
        for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
            row[targets[[i, h]] as usize] = row[targets[[i, h]] as usize] - T::one();
        }
        dz.mapv_inplace(|v| v * scale);
        grads.heads[h].weight = dz.t().dot(hidden);
        grads.heads[h].bias = dz.sum_axis(Axis(0));
        d_hidden = d_hidden + dz.dot(&head.weight);
    }

    let mut d_out = d_hidden;
    for l in (0..net.trunk.len()).rev() {
        if let Some(m) = masks {
            d_out *= &m[l];
        }
        Zip::from(&mut d_out).and(&cache.pre[l]).for_each(|d, &z| {
            if z <= T::zero() {
                *d = T::zero();
            }
        });
        let input = &cache.activations[l];
        grads.trunk[l].weight = d_out.t().dot(input);
        grads.trunk[l].bias = d_out.sum_axis(Axis(0));
        if l > 0 {
            d_out = d_out.dot(&net.trunk[l].weight);
        }
    }
    Ok((loss_sum, grads))
}

/// Mean batch loss and its gradient.
pub fn loss_and_gradients<T: Real>(
    net: &Network<T>,
    x: ArrayView2<'_, T>,
    targets: ArrayView2<'_, u32>,
    masks: Option<&[Array2<T>]>,
) -> Result<(T, Network<T>), ProbeError> {
    let batch = x.nrows().max(1);
    let scale = T::of(1.0 / batch as f64);
    let (sum, grads) = loss_and_gradients_scaled(net, x, targets, masks, scale)?;
    Ok((sum * scale, grads))
}

/// Mean batch gradient computed over `threads` contiguous row chunks and
/// reduced in chunk order, so results depend only on the thread count.
pub fn batch_gradients<T: Real>(
    net: &Network<T>,
    x: ArrayView2<'_, T>,
    targets: ArrayView2<'_, u32>,
    masks: Option<&[Array2<T>]>,
    threads: usize,
) -> Result<(T, Network<T>), ProbeError> {
    let batch = x.nrows();
    let threads = threads.clamp(1, batch.max(1));
    if threads == 1 {
        return loss_and_gradients(net, x, targets, masks);
    }
    let scale = T::of(1.0 / batch as f64);
    let chunk = batch.div_ceil(threads);
    let bounds: Vec<(usize, usize)> =
        (0..batch).step_by(chunk).map(|s| (s, (s + chunk).min(batch))).collect();
    let parts: Vec<Result<(T, Network<T>), ProbeError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(s, e)| {
                let xs = x.slice(ndarray::s![s..e, ..]);
                let ts = targets.slice(ndarray::s![s..e, ..]);
                let ms: Option<Vec<Array2<T>>> =
                    masks.map(|m| m.iter().map(|a| a.slice(ndarray::s![s..e, ..]).to_owned()).collect());
                scope.spawn(move || loss_and_gradients_scaled(net, xs, ts, ms.as_deref(), scale))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one chunk")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss * scale, grads))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
