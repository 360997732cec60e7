//! Minimal multi-layer perceptron with all weights in one flat vector.
//!
//! Layout of a [`ParamVector`]: for each layer in order, the weight matrix
//! (row-major, `out x in`) followed by the bias vector (`out`).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{ensure_len, Error, Result};
use crate::par;
use crate::rng;

/// Samples per work item when a batch is split across threads. Fixed so the
/// floating-point reduction order never depends on the thread count.
const CHUNK: usize = 32;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

/// Architecture of a fully connected classifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    widths: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    /// `widths` runs from the input dimension through the hidden sizes to
    /// the class count.
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("a model needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if *widths.last().unwrap() < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        Ok(Self { widths, activation })
    }

    pub fn mlp(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        Self::new(widths, activation)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                weights: offset,
                biases: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            layer
        })
    }

    /// Canonical text form, e.g. `mlp:64-128-10:relu`.
    pub fn canonical(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("mlp:{}:{}", widths.join("-"), self.activation)
    }

    /// 64-bit digest identifying the architecture in file headers.
    pub fn digest(&self) -> u64 {
        let h = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(h[..8].try_into().unwrap())
    }

    /// Parses the form produced by [`ModelSpec::canonical`], with or without
    /// the `mlp:` prefix. The activation defaults to relu.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let s = s.strip_prefix("mlp:").unwrap_or(s);
        let (widths, act) = match s.split_once(':') {
            Some((w, a)) => (w, a.parse()?),
            None => (s, Activation::Relu),
        };
        let widths = widths
            .split('-')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad layer width {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths, act)
    }

    fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Flat weight vector of a classifier. All entries are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Caller guarantees finiteness.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 of the little-endian bytes, hex encoded.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Glorot-uniform weights and zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::substream(seed, INIT_STREAM);
    let mut theta = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut theta[layer.weights..layer.biases] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    ParamVector(theta)
}

fn check_batch(theta: &[f64], spec: &ModelSpec, x: &[f64]) -> Result<usize> {
    ensure_len("parameter vector", spec.param_count(), theta.len())?;
    let dim = spec.input_dim();
    if x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !x.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            what: "sample width",
            expected: dim,
            actual: x.len() % dim,
        });
    }
    Ok(x.len() / dim)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scratch buffers holding one sample's activations.
struct Tape {
    /// Per layer boundary: activations `a_0 = x, a_1, ..., a_L` (logits last).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Tape {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            acts: spec.widths.iter().map(|&w| vec![0.0; w]).collect(),
            pre: spec.widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: vec![0.0; spec.max_width()],
            delta_prev: vec![0.0; spec.max_width()],
        }
    }

    fn forward(&mut self, theta: &[f64], spec: &ModelSpec, x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let depth = spec.widths.len() - 1;
        for (l, layer) in spec.layers().enumerate() {
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let w = &theta[layer.weights..layer.biases];
            let b = &theta[layer.biases..layer.biases + layer.fan_out];
            for o in 0..layer.fan_out {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = b[o] + dot(row, input);
                out[o] = z;
            }
            if l + 1 < depth {
                let pre = &mut self.pre[l + 1];
                pre.copy_from_slice(out);
                for v in out.iter_mut() {
                    *v = spec.activation.apply(*v);
                }
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Backpropagates `d(loss)/d(logits)` (already in `self.delta`) into
    /// `param_grad` and optionally `input_grad`.
    fn backward(
        &mut self,
        theta: &[f64],
        spec: &ModelSpec,
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let layers: Vec<Layer> = spec.layers().collect();
        let want_input = input_grad.is_some();
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &self.acts[l];
            let delta = &self.delta[..layer.fan_out];
            if let Some(g) = param_grad.as_deref_mut() {
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut g[layer.weights + o * layer.fan_in..layer.weights + (o + 1) * layer.fan_in];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                    g[layer.biases + o] += d;
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let w = &theta[layer.weights..layer.biases];
            let prev = &mut self.delta_prev[..layer.fan_in];
            prev.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            if l > 0 {
                let pre = &self.pre[l];
                let act = &self.acts[l];
                for i in 0..layer.fan_in {
                    prev[i] *= spec.activation.derivative(pre[i], act[i]);
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
        if let Some(out) = input_grad {
            out.copy_from_slice(&self.delta[..spec.input_dim()]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logits for a row-major batch `x` of `B x I` samples.
pub fn forward(theta: &ParamVector, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    let b = check_batch(&theta.0, spec, x)?;
    let dim = spec.input_dim();
    let k = spec.num_classes();
    let chunks = par::map_chunks(b, CHUNK, |range| {
        let mut tape = Tape::new(spec);
        let mut out = Vec::with_capacity(range.len() * k);
        for i in range {
            tape.forward(&theta.0, spec, &x[i * dim..(i + 1) * dim]);
            out.extend_from_slice(tape.logits());
        }
        out
    });
    Ok(chunks.concat())
}

pub fn predict(theta: &ParamVector, spec: &ModelSpec, x: &[f64]) -> Result<Vec<usize>> {
    let k = spec.num_classes();
    Ok(forward(theta, spec, x)?.chunks(k).map(argmax).collect())
}

/// Number of samples whose predicted class equals the label.
pub fn correct_count(theta: &ParamVector, spec: &ModelSpec, data: &LabeledDataset) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ensure_len("sample width", spec.input_dim(), data.dim())?;
    ensure_len("parameter vector", spec.param_count(), theta.len())?;
    let dim = data.dim();
    let x = data.samples();
    let y = data.labels();
    let counts = par::map_chunks(data.len(), 256, |range| {
        let mut tape = Tape::new(spec);
        range
            .filter(|&i| {
                tape.forward(&theta.0, spec, &x[i * dim..(i + 1) * dim]);
                argmax(tape.logits()) == y[i]
            })
            .count()
    });
    Ok(counts.into_iter().sum())
}

/// Top-1 accuracy on `data`.
pub fn accuracy(theta: &ParamVector, spec: &ModelSpec, data: &LabeledDataset) -> Result<f64> {
    Ok(correct_count(theta, spec, data)? as f64 / data.len() as f64)
}

/// Which gradients [`backprop`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Want {
    pub params: bool,
    pub inputs: bool,
}

impl Want {
    pub const PARAMS: Want = Want { params: true, inputs: false };
    pub const INPUTS: Want = Want { params: false, inputs: true };
    pub const BOTH: Want = Want { params: true, inputs: true };
}

/// Mean cross-entropy over a batch with its gradients.
#[derive(Clone, Debug)]
pub struct Backprop {
    pub loss: f64,
    /// Gradient of the mean loss w.r.t. parameters (empty unless requested).
    pub param_grad: Vec<f64>,
    /// Gradient of the mean loss w.r.t. each input, `B x I` (empty unless
    /// requested).
    pub input_grad: Vec<f64>,
}

fn log_softmax_grad(logits: &[f64], label: usize, delta: &mut [f64], scale: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for (d, z) in delta.iter_mut().zip(logits) {
        *d = (z - lse).exp() * scale;
    }
    delta[label] -= scale;
    lse - logits[label]
}

pub fn backprop(theta: &ParamVector, spec: &ModelSpec, x: &[f64], y: &[usize], want: Want) -> Result<Backprop> {
    let b = check_batch(&theta.0, spec, x)?;
    ensure_len("label count", b, y.len())?;
    let k = spec.num_classes();
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(Error::DimensionMismatch {
            what: "label index",
            expected: k,
            actual: bad,
        });
    }
    let dim = spec.input_dim();
    let d = spec.param_count();
    let scale = 1.0 / b as f64;
    let parts = par::map_chunks(b, CHUNK, |range| {
        let mut tape = Tape::new(spec);
        let mut loss = 0.0;
        let mut grad = if want.params { vec![0.0; d] } else { Vec::new() };
        let mut input_grad = if want.inputs { vec![0.0; range.len() * dim] } else { Vec::new() };
        for (j, i) in range.enumerate() {
            tape.forward(&theta.0, spec, &x[i * dim..(i + 1) * dim]);
            loss += log_softmax_grad(tape.acts.last().unwrap(), y[i], &mut tape.delta[..k], scale);
            let pg = want.params.then_some(grad.as_mut_slice());
            let ig = want.inputs.then(|| &mut input_grad[j * dim..(j + 1) * dim]);
            tape.backward(&theta.0, spec, pg, ig);
        }
        (loss, grad, input_grad)
    });
    let mut out = Backprop {
        loss: 0.0,
        param_grad: if want.params { vec![0.0; d] } else { Vec::new() },
        input_grad: Vec::with_capacity(if want.inputs { b * dim } else { 0 }),
    };
    for (loss, grad, input_grad) in parts {
        out.loss += loss;
        if want.params {
            add_assign(&mut out.param_grad, &grad);
        }
        out.input_grad.extend_from_slice(&input_grad);
    }
    out.loss *= scale;
    Ok(out)
}

pub(crate) fn add_assign(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Mean softmax cross-entropy and its parameter gradient.
pub fn loss_and_grad(theta: &ParamVector, spec: &ModelSpec, x: &[f64], y: &[usize]) -> Result<(f64, ParamVector)> {
    let bp = backprop(theta, spec, x, y, Want::PARAMS)?;
    if !bp.loss.is_finite() || bp.param_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss gradient"));
    }
    Ok((bp.loss, ParamVector(bp.param_grad)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 128,
            steps: 500,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::config(format!(
                "batch size {} must be in 1..={dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Heavy-ball velocity carried between SGD steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumState {
    velocity: Vec<f64>,
}

impl MomentumState {
    pub fn new(len: usize) -> Self {
        Self { velocity: vec![0.0; len] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// One SGD step: `v <- m v + (g + wd theta)`, `theta <- theta - r v`.
pub fn sgd_step(
    theta: &ParamVector,
    grad: &ParamVector,
    cfg: &TrainConfig,
    state: &MomentumState,
) -> Result<(ParamVector, MomentumState)> {
    let mut theta = theta.clone();
    let mut state = state.clone();
    sgd_step_in_place(&mut theta, grad.as_slice(), cfg, &mut state)?;
    Ok((theta, state))
}

pub(crate) fn sgd_step_in_place(
    theta: &mut ParamVector,
    grad: &[f64],
    cfg: &TrainConfig,
    state: &mut MomentumState,
) -> Result<()> {
    ensure_len("gradient", theta.len(), grad.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if state.velocity.is_empty() {
        state.velocity = vec![0.0; theta.len()];
    }
    ensure_len("momentum state", theta.len(), state.velocity.len())?;
    for ((t, v), g) in theta.0.iter_mut().zip(&mut state.velocity).zip(grad) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *t;
        *t -= cfg.learning_rate * *v;
    }
    if theta.0.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(())
}

/// Deterministic mini-batch index stream: a fresh permutation per epoch,
/// consecutive windows of it as batches (the ragged tail is skipped).
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.clamp(1, n.max(1));
        let order = rng::permutation(&mut rng::substream(seed, SHUFFLE_STREAM), n);
        Self {
            n,
            batch,
            seed,
            epoch: 0,
            order,
            pos: 0,
        }
    }

    /// Completed passes over the data.
    pub fn epochs(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.order = rng::permutation(&mut rng::substream(self.seed, SHUFFLE_STREAM + self.epoch), self.n);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}

/// Plain empirical risk minimisation.
pub fn train(spec: &ModelSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ParamVector> {
    train_from(init_params(spec, cfg.seed), spec, data, cfg)
}

/// As [`train`], starting from given weights.
pub fn train_from(
    mut theta: ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ensure_len("sample width", spec.input_dim(), data.dim())?;
    ensure_len("parameter vector", spec.param_count(), theta.len())?;
    cfg.validate(data.len())?;
    let mut state = MomentumState::new(theta.len());
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed);
    for step in 0..cfg.steps {
        let (x, y) = data.gather(sampler.next_batch());
        let bp = backprop(&theta, spec, &x, &y, Want::PARAMS)?;
        if !bp.loss.is_finite() {
            return Err(Error::Diverged { step, loss: bp.loss });
        }
        sgd_step_in_place(&mut theta, &bp.param_grad, cfg, &mut state).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss: bp.loss },
            other => other,
        })?;
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};
    use approx::assert_relative_eq;

    fn rand_theta(spec: &ModelSpec, seed: u64) -> ParamVector {
        let mut v = vec![0.0; spec.param_count()];
        rng::fill_gaussian(&mut rng::substream(seed, 99), &mut v, 0.5);
        ParamVector(v)
    }

    /// Independent dense-math forward pass: explicit weight matrices and
    /// layer-by-layer matrix-vector products.
    fn oracle_logits(theta: &[f64], widths: &[usize], relu: bool, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for (l, w) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mat: Vec<Vec<f64>> = (0..n_out)
                .map(|o| theta[off + o * n_in..off + (o + 1) * n_in].to_vec())
                .collect();
            let bias = &theta[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut z: Vec<f64> = mat.iter().zip(bias).map(|(row, b)| row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + b).collect();
            if l + 2 < widths.len() {
                z = z.into_iter().map(|v| if relu { v.max(0.0) } else { v.tanh() }).collect();
            }
            a = z;
        }
        a
    }

    #[test]
    fn param_count_matches_layer_sum() {
        let spec = ModelSpec::mlp(64, &[128], 10, Activation::Relu).unwrap();
        assert_eq!(spec.param_count(), 64 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(ModelSpec::parse("mlp:64-128-10:relu").unwrap(), spec);
        assert_eq!(ModelSpec::parse(&spec.canonical()).unwrap(), spec);
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let spec = ModelSpec::mlp(4, &[8], 3, Activation::Relu).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let x = [0.3, 0.1, 0.9, 0.5, 1.0, 0.0, 0.2, 0.7];
        let logits = forward(&theta, &spec, &x).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        assert_eq!(predict(&theta, &spec, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn identity_linear_layer_maps_feature_to_class() {
        let spec = ModelSpec::new(vec![4, 4], Activation::Relu).unwrap();
        let mut theta = vec![0.0; spec.param_count()];
        for i in 0..4 {
            theta[i * 4 + i] = 1.0;
        }
        let theta = ParamVector::from_vec(theta).unwrap();
        assert_eq!(predict(&theta, &spec, &[0.0, 0.0, 1.0, 0.0]).unwrap(), vec![2]);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        for act in [Activation::Relu, Activation::Tanh] {
            let spec = ModelSpec::mlp(5, &[7, 6], 4, act).unwrap();
            let theta = rand_theta(&spec, 7);
            let x: Vec<f64> = (0..5 * 9).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
            let got = forward(&theta, &spec, &x).unwrap();
            for (s, sample) in x.chunks(5).enumerate() {
                let want = oracle_logits(theta.as_slice(), spec.widths(), act == Activation::Relu, sample);
                for (g, w) in got[s * 4..(s + 1) * 4].iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-10, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = ModelSpec::mlp(4, &[8], 3, Activation::Relu).unwrap();
        let theta = ParamVector::zeros(5);
        match forward(&theta, &spec, &[0.0; 4]) {
            Err(Error::DimensionMismatch { expected, actual, .. }) => {
                assert_eq!(expected, spec.param_count());
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let spec = ModelSpec::mlp(3, &[4], 10, Activation::Relu).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let (loss, _) = loss_and_grad(&theta, &spec, &[0.2, 0.4, 0.6], &[3]).unwrap();
        assert_relative_eq!(loss, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn saturated_correct_sample_has_vanishing_loss() {
        let spec = ModelSpec::new(vec![2, 2], Activation::Relu).unwrap();
        // logit_1 - logit_0 = 40
        let theta = ParamVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, -20.0, 20.0]).unwrap();
        let (loss, grad) = loss_and_grad(&theta, &spec, &[0.5, 0.5], &[1]).unwrap();
        assert!(loss < 1e-6);
        assert!(grad.norm() < 1e-4);
    }

    fn finite_difference_check(spec: &ModelSpec, seed: u64) {
        let theta = rand_theta(spec, seed);
        let mut r = rng::substream(seed, 5);
        let b = 6;
        let x: Vec<f64> = (0..b * spec.input_dim()).map(|_| r.random::<f64>()).collect();
        let y: Vec<usize> = (0..b).map(|i| i % spec.num_classes()).collect();
        let bp = backprop(&theta, spec, &x, &y, Want::BOTH).unwrap();
        let h = 1e-5;
        let loss_at = |t: &[f64], xs: &[f64]| {
            backprop(&ParamVector(t.to_vec()), spec, xs, &y, Want { params: false, inputs: false })
                .unwrap()
                .loss
        };
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut p = theta.0.clone();
            p[i] += h;
            let up = loss_at(&p, &x);
            p[i] -= 2.0 * h;
            let down = loss_at(&p, &x);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - bp.param_grad[i]).abs() / fd.abs().max(bp.param_grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        for i in 0..x.len() {
            let mut xs = x.clone();
            xs[i] += h;
            let up = loss_at(&theta.0, &xs);
            xs[i] -= 2.0 * h;
            let down = loss_at(&theta.0, &xs);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - bp.input_grad[i]).abs() / fd.abs().max(bp.input_grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            finite_difference_check(&ModelSpec::mlp(2, &[16], 3, Activation::Tanh).unwrap(), seed);
            finite_difference_check(&ModelSpec::mlp(2, &[16], 3, Activation::Relu).unwrap(), seed);
        }
    }

    #[test]
    fn sgd_step_rules() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let theta = ParamVector::from_vec(vec![1.0, -2.0, 0.5]).unwrap();
        let state = MomentumState::new(3);
        let (same, _) = sgd_step(&theta, &ParamVector::zeros(3), &cfg, &state).unwrap();
        assert_eq!(same, theta);
        let ones = ParamVector::from_vec(vec![1.0; 3]).unwrap();
        let (next, _) = sgd_step(&theta, &ones, &cfg, &state).unwrap();
        for (a, b) in next.as_slice().iter().zip(theta.as_slice()) {
            assert_relative_eq!(*a, b - 0.1, epsilon = 1e-15);
        }
        let nan = ParamVector(vec![f64::NAN, 0.0, 0.0]);
        assert!(matches!(sgd_step(&theta, &nan, &cfg, &state), Err(Error::NonFinite(_))));
    }

    #[test]
    fn momentum_matches_scalar_recursion() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-3,
            ..TrainConfig::default()
        };
        let g1 = [0.3, -1.2];
        let g2 = [-0.7, 0.4];
        let t0 = [0.25, -0.5];
        let state = MomentumState::new(2);
        let theta = ParamVector::from_vec(t0.to_vec()).unwrap();
        let (t1, s1) = sgd_step(&theta, &ParamVector(g1.to_vec()), &cfg, &state).unwrap();
        let (t2, _) = sgd_step(&t1, &ParamVector(g2.to_vec()), &cfg, &s1).unwrap();
        for i in 0..2 {
            let mut v = 0.0;
            let mut t = t0[i];
            for g in [g1[i], g2[i]] {
                v = 0.9 * v + (g + 1e-3 * t);
                t -= 0.05 * v;
            }
            assert!((t2.as_slice()[i] - t).abs() <= 1e-12);
        }
    }

    fn two_blobs() -> (LabeledDataset, LabeledDataset) {
        make_blobs(&BlobSpec {
            classes: 2,
            dim: 2,
            train_per_class: 100,
            test_per_class: 100,
            spread: 0.05,
            center_spread: 0.3,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (train_set, _) = two_blobs();
        let spec = ModelSpec::mlp(2, &[16], 2, Activation::Relu).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 32,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let theta = train(&spec, &train_set, &cfg).unwrap();
        assert!(accuracy(&theta, &spec, &train_set).unwrap() >= 0.99);
    }

    #[test]
    fn training_is_deterministic_and_zero_steps_is_identity() {
        let (train_set, _) = two_blobs();
        let spec = ModelSpec::mlp(2, &[16], 2, Activation::Relu).unwrap();
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&spec, &train_set, &cfg).unwrap();
        let b = train(&spec, &train_set, &cfg).unwrap();
        assert_eq!(a.digest_hex(), b.digest_hex());
        let zero = train(&spec, &train_set, &TrainConfig { steps: 0, ..cfg }).unwrap();
        assert_eq!(zero, init_params(&spec, 9));
    }

    #[test]
    fn divergence_reports_step() {
        let (train_set, _) = two_blobs();
        let spec = ModelSpec::mlp(2, &[16], 2, Activation::Relu).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 16,
            learning_rate: 1e200,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&spec, &train_set, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn accuracy_matches_per_sample_recount() {
        let (train_set, test_set) = two_blobs();
        let spec = ModelSpec::mlp(2, &[16], 2, Activation::Relu).unwrap();
        let theta = train(&spec, &train_set, &TrainConfig { steps: 20, batch_size: 16, ..Default::default() }).unwrap();
        let mut hits = 0;
        for i in 0..test_set.len() {
            let logits = oracle_logits(theta.as_slice(), spec.widths(), true, test_set.row(i));
            if argmax(&logits) == test_set.labels()[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&theta, &spec, &test_set).unwrap(), hits as f64 / test_set.len() as f64);
    }

    #[test]
    fn constant_predictor_accuracy() {
        let spec = ModelSpec::mlp(2, &[3], 4, Activation::Relu).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let data = LabeledDataset::new(vec![0.5; 16], (0..8).map(|i| i % 4).collect(), 2, 4, "const", 0).unwrap();
        assert_eq!(accuracy(&theta, &spec, &data).unwrap(), 0.25);
        let all_zero = LabeledDataset::new(vec![0.5; 16], vec![0; 8], 2, 4, "const", 0).unwrap();
        assert_eq!(accuracy(&theta, &spec, &all_zero).unwrap(), 1.0);
    }

    #[test]
    fn logit_shift_does_not_change_argmax() {
        let v = [0.3, 1.7, 1.7, -2.0];
        assert_eq!(argmax(&v), 1);
        let shifted: Vec<f64> = v.iter().map(|z| z + 123.25).collect();
        assert_eq!(argmax(&shifted), 1);
    }
}
