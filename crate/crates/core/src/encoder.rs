//! MLP encoder with a unit-normalizing output, its momentum copy and the key queue.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{HcscError, Result};
use crate::vector::{dot, norm, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = HcscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            other => Err(HcscError::config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer widths from input to output. Hidden layers use `activation`; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

/// Fully connected layer, `weights` row-major with shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

/// Weights of the encoder `f_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl EncoderParams {
    /// Kaiming-style Gaussian init (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let widths = config.widths();
        if widths.iter().any(|&w| w == 0) {
            return Err(HcscError::config("layer widths must be positive"));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut layer = Dense::zeros(w[0], w[1]);
                let std = (2.0 / w[0] as f64).sqrt();
                for x in &mut layer.weights {
                    let g: f64 = StandardNormal.sample(rng);
                    *x = std * g;
                }
                layer
            })
            .collect();
        Ok(Self {
            layers,
            activation: config.activation,
        })
    }

    /// A single linear layer equal to the identity map.
    pub fn identity(dim: usize) -> Self {
        let mut layer = Dense::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        Self {
            layers: vec![layer],
            activation: Activation::Identity,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Tensors in declared order: for each layer, weights then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *it.next().expect("flat parameter vector too short");
            }
        }
    }

    /// Rounds every entry to the nearest `f32`, so the state is exactly representable on disk.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            crate::vector::axpy(alpha, b, a);
        }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| crate::vector::sq_dist(a, b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-sample activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleCache {
    /// `acts[0]` is the input, `acts[i]` the output of layer `i - 1` (post-activation).
    acts: Vec<Vec<f64>>,
    /// Norm of the last layer's output before normalization.
    out_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn forward_one(params: &EncoderParams, x: &[f64]) -> Result<(Embedding, SampleCache)> {
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut h = layer.forward(acts.last().unwrap());
        if i != last {
            h.iter_mut().for_each(|v| *v = params.activation.apply(*v));
        }
        if let Some(bad) = h.iter().find(|v| !v.is_finite()) {
            return Err(HcscError::NonFinite {
                layer: i,
                detail: format!("activation value {bad}"),
            });
        }
        acts.push(h);
    }
    let out = acts.last().unwrap();
    let out_norm = norm(out);
    if out_norm == 0.0 || !out_norm.is_finite() {
        return Err(HcscError::NonFinite {
            layer: last,
            detail: format!("output norm {out_norm} cannot be normalized"),
        });
    }
    let z = out.iter().map(|v| v / out_norm).collect();
    Ok((Embedding::from_unit(z)?, SampleCache { acts, out_norm }))
}

/// Embeds a batch; every output lies on the unit sphere.
pub fn encoder_forward(
    params: &EncoderParams,
    batch: &[Vec<f64>],
) -> Result<(Vec<Embedding>, ForwardCache)> {
    let dim = params.input_dim();
    if let Some(bad) = batch.iter().position(|x| x.len() != dim) {
        return Err(HcscError::contract(format!(
            "input {bad} has dimension {}, encoder expects {dim}",
            batch[bad].len()
        )));
    }
    let results = batch
        .par_iter()
        .map(|x| forward_one(params, x))
        .collect::<Result<Vec<_>>>()?;
    let (embeddings, samples) = results.into_iter().unzip();
    Ok((embeddings, ForwardCache { samples }))
}

/// Embeds without retaining a cache.
pub fn embed(params: &EncoderParams, batch: &[Vec<f64>]) -> Result<Vec<Embedding>> {
    encoder_forward(params, batch).map(|(e, _)| e)
}

/// Removes the radial component: `g − z (z·g)`.
pub fn project_to_tangent(z: &[f64], g: &[f64]) -> Vec<f64> {
    let r = dot(z, g);
    g.iter().zip(z).map(|(gi, zi)| gi - r * zi).collect()
}

/// Gradients with respect to all parameters, summed over the batch.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_wrt_embeddings: &[Vec<f64>],
) -> Result<EncoderParams> {
    if grad_wrt_embeddings.len() != cache.samples.len() {
        return Err(HcscError::contract(format!(
            "{} upstream gradients for a batch of {}",
            grad_wrt_embeddings.len(),
            cache.samples.len()
        )));
    }
    let out_dim = params.output_dim();
    if let Some(g) = grad_wrt_embeddings.iter().find(|g| g.len() != out_dim) {
        return Err(HcscError::contract(format!(
            "upstream gradient of dimension {}, expected {out_dim}",
            g.len()
        )));
    }
    if cache
        .samples
        .first()
        .is_some_and(|s| s.acts.len() != params.layers.len() + 1)
    {
        return Err(HcscError::contract("cache does not match encoder depth"));
    }

    let per_sample = cache
        .samples
        .par_iter()
        .zip(grad_wrt_embeddings.par_iter())
        .map(|(s, g)| backward_one(params, s, g))
        .collect::<Vec<_>>();
    let mut total = params.zeros_like();
    for g in &per_sample {
        total.add_scaled(1.0, g);
    }
    Ok(total)
}

fn backward_one(params: &EncoderParams, s: &SampleCache, g_z: &[f64]) -> EncoderParams {
    let mut grads = params.zeros_like();
    let out = s.acts.last().unwrap();
    let z: Vec<f64> = out.iter().map(|v| v / s.out_norm).collect();
    // d(u/‖u‖)/du = (I − ẑẑᵀ)/‖u‖
    let mut delta: Vec<f64> = project_to_tangent(&z, g_z)
        .into_iter()
        .map(|v| v / s.out_norm)
        .collect();
    let last = params.layers.len() - 1;
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        if i != last {
            for (d, y) in delta.iter_mut().zip(&s.acts[i + 1]) {
                *d *= params.activation.derivative_from_output(*y);
            }
        }
        let input = &s.acts[i];
        let gl = &mut grads.layers[i];
        for (o, d) in delta.iter().enumerate() {
            gl.bias[o] += d;
            crate::vector::axpy(*d, input, &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs]);
        }
        if i > 0 {
            let mut prev = vec![0.0; layer.inputs];
            for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                crate::vector::axpy(*d, row, &mut prev);
            }
            delta = prev;
        }
    }
    grads
}

/// EMA copy of the online encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub params: EncoderParams,
    pub m: f64,
}

impl MomentumState {
    pub fn new(online: &EncoderParams, m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(HcscError::config(format!("EMA coefficient {m} outside [0, 1]")));
        }
        Ok(Self {
            params: online.clone(),
            m,
        })
    }
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q`
pub fn ema_update(momentum: &mut MomentumState, online: &EncoderParams) -> Result<()> {
    if !momentum.params.same_shape(online) {
        return Err(HcscError::contract("momentum and online encoders differ in shape"));
    }
    let m = momentum.m;
    for (k, q) in momentum.params.tensors_mut().zip(online.tensors()) {
        for (a, b) in k.iter_mut().zip(q) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// A queued key: momentum-encoder embedding of a dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueKey {
    pub sample_id: u64,
    pub embedding: Embedding,
}

/// Immutable FIFO-ordered view of the queue, oldest first.
pub type QueueSnapshot = Arc<[QueueKey]>;

/// Bounded FIFO of negative keys backed by a ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    buf: Vec<QueueKey>,
    /// Slot the next key overwrites once the buffer is full.
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(HcscError::config("queue capacity must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            buf: Vec::with_capacity(capacity),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Pushes keys in order, evicting the oldest once full.
    pub fn push(&mut self, keys: impl IntoIterator<Item = QueueKey>) -> Result<()> {
        let keys: Vec<QueueKey> = keys.into_iter().collect();
        if let Some(k) = keys.iter().find(|k| k.embedding.dim() != self.dim) {
            return Err(HcscError::contract(format!(
                "key of dimension {} pushed into a queue of dimension {}",
                k.embedding.dim(),
                self.dim
            )));
        }
        for key in keys {
            if self.buf.len() < self.capacity {
                self.buf.push(key);
            } else {
                self.buf[self.cursor] = key;
                self.cursor = (self.cursor + 1) % self.capacity;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        self.iter().cloned().collect::<Vec<_>>().into()
    }

    /// Keys oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueKey> {
        let (newer, older) = self.buf.split_at(self.cursor);
        older.iter().chain(newer)
    }

    /// Rebuilds a queue from keys listed oldest first.
    pub fn from_ordered(capacity: usize, dim: usize, keys: Vec<QueueKey>) -> Result<Self> {
        if keys.len() > capacity {
            return Err(HcscError::contract("more keys than queue capacity"));
        }
        let mut q = Self::new(capacity, dim)?;
        q.push(keys)?;
        Ok(q)
    }
}
