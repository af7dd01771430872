//! Dense network with a shared trunk and two 2-d heads (position, bias),
//! exact reverse-mode gradients, Adam and cosine learning-rate annealing.
//!
//! All arithmetic is `f64`. Matrix products go through `matrixmultiply`,
//! which is single-threaded here, so training is bit-reproducible.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::manifest_path;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Output width of each head.
pub const HEAD_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Multiplies `delta` by the derivative, given the activation output.
    fn backprop(self, out: &[f64], delta: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (d, &a) in delta.iter_mut().zip(out) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (d, &a) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - a * a;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_dim: 18_432,
            hidden_dims: vec![512, 256, 128],
            activation: Activation::Relu,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("network dimensions must be at least 1"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 2);
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        let mut push = |fan_in: usize, fan_out: usize| {
            shapes.push(LayerShape {
                fan_in,
                fan_out,
                offset,
            });
            offset += fan_in * fan_out + fan_out;
        };
        for &width in &self.hidden_dims {
            push(fan_in, width);
            fan_in = width;
        }
        push(fan_in, HEAD_DIM);
        push(fan_in, HEAD_DIM);
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|s| s.fan_in * s.fan_out + s.fan_out)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    /// Start of the weight block; biases follow the weights.
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// Flat parameter vector. Each layer stores a row-major `fan_in x fan_out`
/// weight block followed by its biases; hidden layers come first, then the
/// position head, then the bias head.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    spec: NetworkSpec,
    layers: Vec<LayerShape>,
    pub values: Vec<f64>,
}

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec.layer_shapes();
        Self {
            spec: spec.clone(),
            values: vec![0.0; spec.n_params()],
            layers,
        }
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(Error::Shape {
                expected: format!("{} parameters", spec.n_params()),
                actual: format!("{} parameters", values.len()),
            });
        }
        Ok(Self {
            layers: spec.layer_shapes(),
            spec: spec.clone(),
            values,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn hidden_count(&self) -> usize {
        self.spec.hidden_dims.len()
    }

    fn head(&self, which: usize) -> LayerShape {
        self.layers[self.hidden_count() + which]
    }

    /// Weight slice of layer `l`, in storage order.
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        &self.values[self.layers[l].weights()]
    }

    pub fn layer_biases(&self, l: usize) -> &[f64] {
        &self.values[self.layers[l].biases()]
    }

    /// Position head biases, then bias head biases.
    pub fn head_biases_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let p = self.head(0).biases();
        let b = self.head(1).biases();
        let (left, right) = self.values.split_at_mut(b.start);
        (&mut left[p], &mut right[..HEAD_DIM])
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// He-uniform weights, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Params {
    let mut params = Params::zeros(spec);
    let mut rng = stream_rng(seed, Stream::Init);
    for shape in params.layers.clone() {
        let bound = (6.0 / shape.fan_in as f64).sqrt();
        for w in &mut params.values[shape.weights()] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    params
}

/// Per-sample loss target.
///
/// The sample contributes `position_scale * |l_hat - position| +
/// bias_scale * |dl_hat - bias|` and the batch loss is the mean of the
/// contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: [f64; 2],
    pub bias: [f64; 2],
    pub position_scale: f64,
    pub bias_scale: f64,
}

impl Target {
    /// Position-only Euclidean term.
    pub fn position(position: [f64; 2]) -> Self {
        Self {
            position,
            bias: [0.0; 2],
            position_scale: 1.0,
            bias_scale: 0.0,
        }
    }

    /// Position plus bias terms with unit weights.
    pub fn biased(position: [f64; 2], bias: [f64; 2]) -> Self {
        Self {
            position,
            bias,
            position_scale: 1.0,
            bias_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub position: Vec<[f64; 2]>,
    pub bias: Vec<[f64; 2]>,
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= max_index(m, k, a_strides));
    assert!(b.len() >= max_index(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scratch buffers for one batch.
#[derive(Debug, Default)]
pub struct Workspace {
    hidden: Vec<Vec<f64>>,
    position: Vec<f64>,
    bias: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn affine(shape: LayerShape, values: &[f64], input: &[f64], batch: usize, out: &mut Vec<f64>) {
    out.clear();
    let b = &values[shape.biases()];
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    gemm(
        batch,
        shape.fan_in,
        shape.fan_out,
        input,
        (shape.fan_in, 1),
        &values[shape.weights()],
        (shape.fan_out, 1),
        1.0,
        out,
    );
}

fn check_input(params: &Params, inputs: &[f64], batch: usize) -> Result<()> {
    let dim = params.spec.input_dim;
    if inputs.len() != batch * dim {
        return Err(Error::Shape {
            expected: format!("{batch} x {dim} inputs"),
            actual: format!("{} values", inputs.len()),
        });
    }
    Ok(())
}

fn forward_into(params: &Params, inputs: &[f64], batch: usize, ws: &mut Workspace) {
    let n_hidden = params.hidden_count();
    ws.hidden.resize_with(n_hidden, Vec::new);
    for l in 0..n_hidden {
        let (done, rest) = ws.hidden.split_at_mut(l);
        let input: &[f64] = if l == 0 { inputs } else { &done[l - 1] };
        affine(params.layers[l], &params.values, input, batch, &mut rest[0]);
        params.spec.activation.apply(&mut rest[0]);
    }
    let last: &[f64] = if n_hidden == 0 { inputs } else { &ws.hidden[n_hidden - 1] };
    affine(params.head(0), &params.values, last, batch, &mut ws.position);
    affine(params.head(1), &params.values, last, batch, &mut ws.bias);
}

fn pairs(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Both heads for a row-major `batch x input_dim` input block.
pub fn forward(params: &Params, inputs: &[f64], batch: usize) -> Result<Outputs> {
    check_input(params, inputs, batch)?;
    let mut ws = Workspace::default();
    forward_into(params, inputs, batch, &mut ws);
    Ok(Outputs {
        position: pairs(&ws.position),
        bias: pairs(&ws.bias),
    })
}

fn norm2(r: [f64; 2]) -> f64 {
    r[0].hypot(r[1])
}

/// Batch loss for already computed outputs.
pub fn batch_loss(outputs: &Outputs, targets: &[Target]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let p = outputs.position[i];
            let b = outputs.bias[i];
            let mut v = 0.0;
            if t.position_scale != 0.0 {
                v += t.position_scale * norm2([p[0] - t.position[0], p[1] - t.position[1]]);
            }
            if t.bias_scale != 0.0 {
                v += t.bias_scale * norm2([b[0] - t.bias[0], b[1] - t.bias[1]]);
            }
            v
        })
        .sum();
    total / targets.len() as f64
}

/// Writes `scale * r / |r| / n` into `out`; zero residuals get the zero subgradient.
fn norm_grad(pred: &[f64], target: [f64; 2], scale: f64, inv_n: f64, out: &mut [f64]) -> f64 {
    let r = [pred[0] - target[0], pred[1] - target[1]];
    let len = norm2(r);
    if scale == 0.0 || len == 0.0 {
        out[0] = 0.0;
        out[1] = 0.0;
        return scale * len;
    }
    let f = scale * inv_n / len;
    out[0] = f * r[0];
    out[1] = f * r[1];
    scale * len
}

/// Loss and gradient with respect to every parameter.
pub fn backward(params: &Params, inputs: &[f64], targets: &[Target]) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; params.values.len()];
    let loss = backward_into(params, inputs, targets, &mut Workspace::default(), &mut grads)?;
    Ok((loss, grads))
}

fn backward_into(
    params: &Params,
    inputs: &[f64],
    targets: &[Target],
    ws: &mut Workspace,
    grads: &mut [f64],
) -> Result<f64> {
    let batch = targets.len();
    check_input(params, inputs, batch)?;
    if batch == 0 {
        return Err(Error::domain("empty batch"));
    }
    forward_into(params, inputs, batch, ws);
    let inv_n = 1.0 / batch as f64;

    let mut d_pos = vec![0.0; batch * HEAD_DIM];
    let mut d_bias = vec![0.0; batch * HEAD_DIM];
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let s = i * HEAD_DIM..(i + 1) * HEAD_DIM;
        loss += norm_grad(&ws.position[s.clone()], t.position, t.position_scale, inv_n, &mut d_pos[s.clone()]);
        loss += norm_grad(&ws.bias[s.clone()], t.bias, t.bias_scale, inv_n, &mut d_bias[s]);
    }
    loss *= inv_n;

    let n_hidden = params.hidden_count();
    let last: &[f64] = if n_hidden == 0 { inputs } else { &ws.hidden[n_hidden - 1] };
    let last_width = params.head(0).fan_in;

    for (which, delta) in [(0, &d_pos), (1, &d_bias)] {
        let shape = params.head(which);
        gemm(
            last_width,
            batch,
            HEAD_DIM,
            last,
            (1, last_width),
            delta,
            (HEAD_DIM, 1),
            0.0,
            &mut grads[shape.weights()],
        );
        let gb = &mut grads[shape.biases()];
        gb.iter_mut().for_each(|g| *g = 0.0);
        for row in delta.chunks_exact(HEAD_DIM) {
            gb[0] += row[0];
            gb[1] += row[1];
        }
    }
    if n_hidden == 0 {
        return Ok(loss);
    }

    // delta at the last hidden output = d_pos Wp^T + d_bias Wb^T
    ws.delta.clear();
    ws.delta.resize(batch * last_width, 0.0);
    for (which, delta) in [(0, &d_pos), (1, &d_bias)] {
        let shape = params.head(which);
        gemm(
            batch,
            HEAD_DIM,
            last_width,
            delta,
            (HEAD_DIM, 1),
            &params.values[shape.weights()],
            (1, HEAD_DIM),
            1.0,
            &mut ws.delta,
        );
    }

    for l in (0..n_hidden).rev() {
        let shape = params.layers[l];
        params.spec.activation.backprop(&ws.hidden[l], &mut ws.delta);
        let input: &[f64] = if l == 0 { inputs } else { &ws.hidden[l - 1] };
        gemm(
            shape.fan_in,
            batch,
            shape.fan_out,
            input,
            (1, shape.fan_in),
            &ws.delta,
            (shape.fan_out, 1),
            0.0,
            &mut grads[shape.weights()],
        );
        let gb = &mut grads[shape.biases()];
        gb.iter_mut().for_each(|g| *g = 0.0);
        for row in ws.delta.chunks_exact(shape.fan_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l > 0 {
            ws.delta_prev.clear();
            ws.delta_prev.resize(batch * shape.fan_in, 0.0);
            gemm(
                batch,
                shape.fan_out,
                shape.fan_in,
                &ws.delta,
                (shape.fan_out, 1),
                &params.values[shape.weights()],
                (1, shape.fan_out),
                0.0,
                &mut ws.delta_prev,
            );
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Params, state: &mut AdamState, grads: &[f64], lr: f64, cfg: &AdamConfig) {
    assert_eq!(grads.len(), params.values.len(), "gradient length");
    assert_eq!(state.m.len(), params.values.len(), "optimizer state length");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, m), v), &g) in params
        .values
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
        .zip(grads)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    let frac = epoch.min(total_epochs) as f64 / total_epochs.max(1) as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-2,
            batch_size: 256,
            epochs: 150,
            schedule: Schedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("lr0 > 0, batch_size >= 1 and epochs >= 1 are required"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(epoch, self.epochs, self.lr0),
            Schedule::Constant => self.lr0,
        }
    }
}

/// SHA-256 of a configuration's canonical JSON encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ConfigHash(pub [u8; 32]);

impl ConfigHash {
    pub fn of<T: Serialize>(value: &T) -> Self {
        let json = serde_json::to_vec(value).expect("configuration serializes");
        Self(Sha256::digest(json).into())
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConfigHash({self})")
    }
}

impl Serialize for ConfigHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConfigHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("config hash must be 32 bytes"))?;
        Ok(Self(arr))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: ConfigHash,
    /// Scheme that produced the model, e.g. `SSLB`.
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: Params,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn spec(&self) -> &NetworkSpec {
        self.params.spec()
    }
}

/// Source of training rows. Inputs are produced on demand so large feature
/// matrices never have to be materialized.
pub trait TrainingData: Sync {
    fn len(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Writes the inputs of `indices` row by row into `out`.
    fn fill_inputs(&self, indices: &[usize], out: &mut [f64]);
    fn target(&self, index: usize) -> Target;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Materialized inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryData {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Vec<Target>,
}

impl TrainingData for InMemoryData {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn fill_inputs(&self, indices: &[usize], out: &mut [f64]) {
        let d = self.input_dim;
        for (row, &i) in out.chunks_exact_mut(d).zip(indices) {
            row.copy_from_slice(&self.inputs[i * d..(i + 1) * d]);
        }
    }

    fn target(&self, index: usize) -> Target {
        self.targets[index]
    }
}

/// Called after every epoch with the epoch index and current parameters.
pub type EpochMonitor<'a> = &'a mut dyn FnMut(usize, &Params);

/// Shuffled minibatch Adam over `cfg.epochs` epochs.
pub fn train(
    mut params: Params,
    data: &dyn TrainingData,
    cfg: &TrainConfig,
    provenance: Provenance,
    mut monitor: Option<EpochMonitor<'_>>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    if data.input_dim() != params.spec.input_dim {
        return Err(Error::Shape {
            expected: format!("input dim {}", params.spec.input_dim),
            actual: format!("input dim {}", data.input_dim()),
        });
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(params.values.len());
    let mut grads = vec![0.0; params.values.len()];
    let mut ws = Workspace::default();
    let mut rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::with_capacity(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let dim = data.input_dim();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr(epoch);
        let mut epoch_loss = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            inputs.resize(chunk.len() * dim, 0.0);
            data.fill_inputs(chunk, &mut inputs);
            targets.clear();
            targets.extend(chunk.iter().map(|&i| data.target(i)));
            let loss = backward_into(&params, &inputs, &targets, &mut ws, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    loss,
                });
            }
            adam_step(&mut params, &mut state, &grads, lr, &adam);
            epoch_loss += loss * chunk.len() as f64;
        }
        history.push(epoch_loss / data.len() as f64);
        if let Some(m) = monitor.as_mut() {
            m(epoch, &params);
        }
    }
    Ok(TrainedModel {
        params,
        loss_history: history,
        provenance,
    })
}

/// Forward pass over `n` rows supplied by `fill`, in batches of `batch`.
pub fn predict_with(
    params: &Params,
    n: usize,
    batch: usize,
    mut fill: impl FnMut(&[usize], &mut [f64]),
) -> Outputs {
    let dim = params.spec.input_dim;
    let mut ws = Workspace::default();
    let mut out = Outputs {
        position: Vec::with_capacity(n),
        bias: Vec::with_capacity(n),
    };
    let indices: Vec<usize> = (0..n).collect();
    let mut inputs = Vec::new();
    for chunk in indices.chunks(batch.max(1)) {
        inputs.resize(chunk.len() * dim, 0.0);
        fill(chunk, &mut inputs);
        forward_into(params, &inputs, chunk.len(), &mut ws);
        out.position.extend(pairs(&ws.position));
        out.bias.extend(pairs(&ws.bias));
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSLM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    loss_history: Vec<f64>,
    provenance: Provenance,
}

pub fn encode_checkpoint(model: &TrainedModel) -> Vec<u8> {
    let spec = model.spec();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
    buf.push(spec.activation.code());
    buf.extend_from_slice(&(spec.hidden_dims.len() as u32).to_le_bytes());
    for &h in &spec.hidden_dims {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.provenance.seed.to_le_bytes());
    buf.extend_from_slice(&model.provenance.config_hash.0);
    let scheme = model.provenance.scheme.as_bytes();
    buf.extend_from_slice(&(scheme.len() as u16).to_le_bytes());
    buf.extend_from_slice(scheme);
    buf.extend_from_slice(&(model.params.values.len() as u64).to_le_bytes());
    for v in &model.params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], loss_history: Vec<f64>) -> Result<TrainedModel> {
    let mut offset = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let slice = bytes.get(offset..offset + n).ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("checkpoint truncated while reading {what}"),
        })?;
        offset += n;
        Ok(slice)
    };
    if take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a model checkpoint".into(),
        });
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let input_dim = u32_at(take(4, "input dim")?) as usize;
    let act_code = take(1, "activation")?[0];
    let activation = Activation::from_code(act_code).ok_or_else(|| Error::Format {
        offset: 12,
        message: format!("unknown activation code {act_code}"),
    })?;
    let n_hidden = u32_at(take(4, "layer count")?) as usize;
    let hidden_dims = (0..n_hidden)
        .map(|_| take(4, "layer width").map(|s| u32_at(s) as usize))
        .collect::<Result<Vec<_>>>()?;
    let seed = u64::from_le_bytes(take(8, "seed")?.try_into().expect("8 bytes"));
    let config_hash = ConfigHash(take(32, "config hash")?.try_into().expect("32 bytes"));
    let scheme_len = u16::from_le_bytes(take(2, "scheme length")?.try_into().expect("2 bytes")) as usize;
    let scheme = String::from_utf8_lossy(take(scheme_len, "scheme")?).into_owned();
    let n_values = u64::from_le_bytes(take(8, "weight count")?.try_into().expect("8 bytes")) as usize;
    let spec = NetworkSpec {
        input_dim,
        hidden_dims,
        activation,
    };
    if n_values != spec.n_params() {
        return Err(Error::Shape {
            expected: format!("{} weights for the stored architecture", spec.n_params()),
            actual: format!("{n_values}"),
        });
    }
    let raw = take(n_values * 8, "weights")?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(TrainedModel {
        params: Params::from_values(&spec, values)?,
        loss_history,
        provenance: Provenance {
            seed,
            config_hash,
            scheme,
        },
    })
}

/// Writes the binary checkpoint and a `<file>.json` loss-history sidecar.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    let json = serde_json::to_vec_pretty(&CheckpointSidecar {
        loss_history: model.loss_history.clone(),
        provenance: model.provenance.clone(),
    })
    .map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    let history = if side.exists() {
        let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: CheckpointSidecar = serde_json::from_slice(&text).map_err(|e| Error::json(&side, e))?;
        sidecar.loss_history
    } else {
        Vec::new()
    };
    decode_checkpoint(&bytes, history)
}
