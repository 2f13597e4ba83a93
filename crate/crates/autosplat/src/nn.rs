//! Minimal reverse-mode autodiff: batched dense MLPs with explicit tapes,
//! Adam, the two losses used by the pose adaptor, and the checkpoint
//! container shared by every trainable component.
//!
//! There is no general computation graph. Each network records a tape during
//! `forward` and plays it back in `backward`; compositions across networks
//! are chained by hand where they occur (renderer, deformation pipeline,
//! adaptor losses).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub mod gradcheck;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tape is stale: parameters changed since forward (version {tape} vs {current})")]
    StaleTape { tape: u64, current: u64 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major buffer with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/value count mismatch"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(&[n], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, context: &str) -> Result<(), NnError> {
        if self.shape != other.shape {
            return Err(NnError::ShapeMismatch {
                context: context.to_string(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    None,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::None => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Layer widths (input first), one activation per layer, and the constant the
/// final-layer biases are initialized to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub final_bias_init: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, final_bias_init: f64) -> Self {
        assert!(widths.len() >= 2, "need at least one layer");
        assert_eq!(
            activations.len(),
            widths.len() - 1,
            "one activation per layer"
        );
        assert!(widths.iter().all(|&w| w >= 1), "zero-width layer");
        Self {
            widths,
            activations,
            final_bias_init,
        }
    }

    /// ReLU hidden layers and a linear head.
    pub fn relu_net(widths: Vec<usize>, final_bias_init: f64) -> Self {
        let n_layers = widths.len() - 1;
        let mut activations = vec![Activation::Relu; n_layers];
        activations[n_layers - 1] = Activation::None;
        Self::new(widths, activations, final_bias_init)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Fully-connected network. Weights are `[out, in]` row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    version: u64,
}

/// Recorded activations of one batched forward pass.
pub struct MlpTape {
    /// `layer_outputs[0]` is the input batch, `layer_outputs[l+1]` the
    /// post-activation output of layer `l`.
    layer_outputs: Vec<Tensor>,
    batch: usize,
    rank1: bool,
    version: u64,
}

/// Per-layer parameter gradients plus the gradient w.r.t. the input batch.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Tensor>,
    pub d_biases: Vec<Tensor>,
    pub d_input: Tensor,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            d_weights: mlp.weights.iter().map(|w| Tensor::zeros(&w.shape)).collect(),
            d_biases: mlp.biases.iter().map(|b| Tensor::zeros(&b.shape)).collect(),
            d_input: Tensor::zeros(&[0]),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(other.d_weights.iter()) {
            for (x, y) in a.data.iter_mut().zip(b.data.iter()) {
                *x += *y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(other.d_biases.iter()) {
            for (x, y) in a.data.iter_mut().zip(b.data.iter()) {
                *x += *y;
            }
        }
    }
}

/// Batch sizes below this run single-threaded; the parallel split is by
/// output rows, so results are bit-identical either way.
const PAR_THRESHOLD: usize = 4096;

impl Mlp {
    /// Xavier-uniform weights, zero biases except the final layer which takes
    /// `spec.final_bias_init`.
    pub fn init(spec: MlpSpec, rng: &mut impl rand::Rng) -> Self {
        let n_layers = spec.widths.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            weights.push(Tensor::from_vec(&[fan_out, fan_in], w));
            let bias_val = if l == n_layers - 1 {
                spec.final_bias_init
            } else {
                0.0
            };
            biases.push(Tensor::from_vec(&[fan_out], vec![bias_val; fan_out]));
        }
        Self {
            spec,
            weights,
            biases,
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Zeroes the last layer's weights and biases (identity-offset heads).
    pub fn zero_final_layer(&mut self) {
        let l = self.num_layers() - 1;
        self.weights[l].data.fill(0.0);
        self.biases[l].data.fill(0.0);
        self.version += 1;
    }

    pub fn set_final_bias(&mut self, values: &[f64]) {
        let l = self.num_layers() - 1;
        assert_eq!(values.len(), self.biases[l].len());
        self.biases[l].data.copy_from_slice(values);
        self.version += 1;
    }

    /// Batched forward pass; `input` is `[batch, in]` (or `[in]` for one row).
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, MlpTape), NnError> {
        let (batch, in_w) = match input.shape.as_slice() {
            [w] => (1, *w),
            [n, w] => (*n, *w),
            other => {
                return Err(NnError::ShapeMismatch {
                    context: "mlp_forward input rank".into(),
                    expected: vec![0, self.spec.input_width()],
                    got: other.to_vec(),
                })
            }
        };
        if in_w != self.spec.input_width() {
            return Err(NnError::ShapeMismatch {
                context: "mlp_forward input width".into(),
                expected: vec![batch, self.spec.input_width()],
                got: input.shape.clone(),
            });
        }

        let rank1 = input.shape.len() == 1;
        let mut outputs = Vec::with_capacity(self.num_layers() + 1);
        outputs.push(Tensor::from_vec(&[batch, in_w], input.data.clone()));
        for l in 0..self.num_layers() {
            let prev = &outputs[l];
            let out = layer_forward(
                prev,
                &self.weights[l],
                &self.biases[l],
                self.spec.activations[l],
            );
            outputs.push(out);
        }
        let mut out = outputs.last().unwrap().clone();
        if rank1 {
            out.shape = vec![self.spec.output_width()];
        }
        debug_assert!(out.all_finite(), "non-finite forward output");
        Ok((
            out,
            MlpTape {
                layer_outputs: outputs,
                batch,
                rank1,
                version: self.version,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Exact reverse pass for the recorded forward.
    pub fn backward(&self, tape: &MlpTape, d_output: &Tensor) -> Result<MlpGrads, NnError> {
        if tape.version != self.version {
            return Err(NnError::StaleTape {
                tape: tape.version,
                current: self.version,
            });
        }
        let out_w = self.spec.output_width();
        let expected = vec![tape.batch, out_w];
        let got_rows = match d_output.shape.as_slice() {
            [w] if *w == out_w => 1,
            [n, w] if *w == out_w => *n,
            _ => 0,
        };
        if got_rows != tape.batch {
            return Err(NnError::ShapeMismatch {
                context: "mlp_backward output gradient".into(),
                expected,
                got: d_output.shape.clone(),
            });
        }

        let n_layers = self.num_layers();
        let mut d_weights = Vec::with_capacity(n_layers);
        let mut d_biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            d_weights.push(Tensor::zeros(&self.weights[l].shape));
            d_biases.push(Tensor::zeros(&self.biases[l].shape));
        }

        let mut d_act = d_output.data.clone();
        for l in (0..n_layers).rev() {
            let act = self.spec.activations[l];
            let out = &tape.layer_outputs[l + 1];
            let prev = &tape.layer_outputs[l];
            // d_z = d_act * act'(out)
            let mut d_z = d_act;
            for (dz, a) in d_z.iter_mut().zip(out.data.iter()) {
                *dz *= act.derivative_from_output(*a);
            }
            let (in_w, out_w) = (self.spec.widths[l], self.spec.widths[l + 1]);
            // d_W[o,i] = sum_n d_z[n,o] * prev[n,i]
            let dw = &mut d_weights[l].data;
            let par = tape.batch * in_w * out_w >= PAR_THRESHOLD * 8;
            let fill_row = |o: usize, row: &mut [f64]| {
                for n in 0..tape.batch {
                    let dzo = d_z[n * out_w + o];
                    if dzo == 0.0 {
                        continue;
                    }
                    let prow = &prev.data[n * in_w..(n + 1) * in_w];
                    for (ri, pi) in row.iter_mut().zip(prow.iter()) {
                        *ri += dzo * pi;
                    }
                }
            };
            if par {
                dw.par_chunks_mut(in_w)
                    .enumerate()
                    .for_each(|(o, row)| fill_row(o, row));
            } else {
                for (o, row) in dw.chunks_mut(in_w).enumerate() {
                    fill_row(o, row);
                }
            }
            let db = &mut d_biases[l].data;
            for n in 0..tape.batch {
                for o in 0..out_w {
                    db[o] += d_z[n * out_w + o];
                }
            }
            // d_prev[n,i] = sum_o d_z[n,o] * W[o,i]
            let w = &self.weights[l].data;
            let mut d_prev = vec![0.0; tape.batch * in_w];
            let back_row = |n: usize, drow: &mut [f64]| {
                for o in 0..out_w {
                    let dzo = d_z[n * out_w + o];
                    if dzo == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * in_w..(o + 1) * in_w];
                    for (di, wi) in drow.iter_mut().zip(wrow.iter()) {
                        *di += dzo * wi;
                    }
                }
            };
            if par {
                d_prev
                    .par_chunks_mut(in_w)
                    .enumerate()
                    .for_each(|(n, drow)| back_row(n, drow));
            } else {
                for (n, drow) in d_prev.chunks_mut(in_w).enumerate() {
                    back_row(n, drow);
                }
            }
            d_act = d_prev;
        }

        let d_input = if tape.rank1 {
            Tensor::from_vec(&[self.spec.input_width()], d_act)
        } else {
            Tensor::from_vec(&[tape.batch, self.spec.input_width()], d_act)
        };
        Ok(MlpGrads {
            d_weights,
            d_biases,
            d_input,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(
            &format!("{prefix}.spec"),
            serde_json::to_value(&self.spec).unwrap(),
        );
        for (l, w) in self.weights.iter().enumerate() {
            ckpt.push_block(&format!("{prefix}.w{l}"), w.data.clone());
        }
        for (l, b) in self.biases.iter().enumerate() {
            ckpt.push_block(&format!("{prefix}.b{l}"), b.data.clone());
        }
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self, NnError> {
        let spec_val = ckpt.meta(&format!("{prefix}.spec")).ok_or_else(|| {
            NnError::MalformedCheckpoint(format!("missing {prefix}.spec in header"))
        })?;
        let spec: MlpSpec = serde_json::from_value(spec_val.clone())
            .map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
        let n_layers = spec.widths.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let w = ckpt.block(&format!("{prefix}.w{l}")).ok_or_else(|| {
                NnError::MalformedCheckpoint(format!("missing block {prefix}.w{l}"))
            })?;
            if w.len() != fan_in * fan_out {
                return Err(NnError::MalformedCheckpoint(format!(
                    "block {prefix}.w{l} has {} values, expected {}",
                    w.len(),
                    fan_in * fan_out
                )));
            }
            weights.push(Tensor::from_vec(&[fan_out, fan_in], w.to_vec()));
            let b = ckpt.block(&format!("{prefix}.b{l}")).ok_or_else(|| {
                NnError::MalformedCheckpoint(format!("missing block {prefix}.b{l}"))
            })?;
            biases.push(Tensor::from_vec(&[fan_out], b.to_vec()));
        }
        Ok(Self {
            spec,
            weights,
            biases,
            version: 0,
        })
    }
}

fn layer_forward(input: &Tensor, w: &Tensor, b: &Tensor, act: Activation) -> Tensor {
    let batch = input.shape[0];
    let in_w = input.shape[1];
    let out_w = w.shape[0];
    let mut out = vec![0.0; batch * out_w];
    let run_row = |n: usize, orow: &mut [f64]| {
        let irow = &input.data[n * in_w..(n + 1) * in_w];
        for (o, ov) in orow.iter_mut().enumerate() {
            let wrow = &w.data[o * in_w..(o + 1) * in_w];
            let mut acc = b.data[o];
            for (wi, xi) in wrow.iter().zip(irow.iter()) {
                acc += wi * xi;
            }
            *ov = act.apply(acc);
        }
    };
    if batch * in_w * out_w >= PAR_THRESHOLD * 8 {
        out.par_chunks_mut(out_w)
            .enumerate()
            .for_each(|(n, orow)| run_row(n, orow));
    } else {
        for (n, orow) in out.chunks_mut(out_w).enumerate() {
            run_row(n, orow);
        }
    }
    Tensor::from_vec(&[batch, out_w], out)
}

/// Forward identity. Anything flowing backward through a stopped value
/// contributes zero; see [`stop_gradient_backward`].
pub fn stop_gradient(x: &Tensor) -> Tensor {
    x.clone()
}

/// The reverse rule of [`stop_gradient`]: the upstream gradient is dropped.
pub fn stop_gradient_backward(d_output: &Tensor) -> Tensor {
    Tensor::zeros(&d_output.shape)
}

/// Mean smooth-L1 (beta = 1): `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise.
/// Returns the loss and its gradient w.r.t. `a` (the gradient w.r.t. `b` is
/// the negation).
pub fn smooth_l1(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor), NnError> {
    a.same_shape(b, "smooth_l1")?;
    let n = a.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; a.len()];
    for (i, (x, y)) in a.data.iter().zip(b.data.iter()).enumerate() {
        let d = x - y;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad[i] = d / n;
        } else {
            loss += d.abs() - 0.5;
            grad[i] = d.signum() / n;
        }
    }
    Ok((loss / n, Tensor::from_vec(&a.shape, grad)))
}

/// Mean squared error plus gradient w.r.t. `a`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor), NnError> {
    a.same_shape(b, "mse")?;
    let n = a.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; a.len()];
    for (i, (x, y)) in a.data.iter().zip(b.data.iter()).enumerate() {
        let d = x - y;
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((loss / n, Tensor::from_vec(&a.shape, grad)))
}

/// Adam over one flat parameter buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam buffer size mismatch");
        assert_eq!(params.len(), grads.len(), "adam gradient size mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Rebuilds moment buffers after primitives were reordered/added/removed.
    /// `mapping[new_index]` is the old index to inherit from (`None` starts
    /// fresh), with `stride` values per entry.
    pub fn remap(&mut self, mapping: &[Option<usize>], stride: usize) {
        let mut m = vec![0.0; mapping.len() * stride];
        let mut v = vec![0.0; mapping.len() * stride];
        for (new, old) in mapping.iter().enumerate() {
            if let Some(old) = old {
                m[new * stride..(new + 1) * stride]
                    .copy_from_slice(&self.m[old * stride..(old + 1) * stride]);
                v[new * stride..(new + 1) * stride]
                    .copy_from_slice(&self.v[old * stride..(old + 1) * stride]);
            }
        }
        self.m = m;
        self.v = v;
    }

    /// Clears first/second moments for the given entries (used by the
    /// opacity-reset hook).
    pub fn reset_entries(&mut self, indices: &[usize], stride: usize) {
        for &i in indices {
            for k in 0..stride {
                self.m[i * stride + k] = 0.0;
                self.v[i * stride + k] = 0.0;
            }
        }
    }
}

/// Adam over every tensor of one MLP.
#[derive(Debug, Clone)]
pub struct MlpAdam {
    w_opts: Vec<Adam>,
    b_opts: Vec<Adam>,
}

impl MlpAdam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Self {
            w_opts: mlp.weights.iter().map(|w| Adam::new(lr, w.len())).collect(),
            b_opts: mlp.biases.iter().map(|b| Adam::new(lr, b.len())).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for o in self.w_opts.iter_mut().chain(self.b_opts.iter_mut()) {
            o.lr = lr;
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads) {
        for (l, opt) in self.w_opts.iter_mut().enumerate() {
            opt.step(&mut mlp.weights[l].data, &grads.d_weights[l].data);
        }
        for (l, opt) in self.b_opts.iter_mut().enumerate() {
            opt.step(&mut mlp.biases[l].data, &grads.d_biases[l].data);
        }
        mlp.bump_version();
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ASCHKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: serde_json::Map<String, serde_json::Value>,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    len: usize,
}

/// On-disk container: 8-byte magic, little-endian u64 header length, a JSON
/// header (metadata plus block directory), then the named blocks as raw
/// little-endian f64 in directory order.
#[derive(Default)]
pub struct Checkpoint {
    meta: serde_json::Map<String, serde_json::Value>,
    blocks: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.meta.get(key)
    }

    pub fn push_block(&mut self, name: &str, data: Vec<f64>) {
        self.blocks.push((name.to_string(), data));
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn write(&self, path: &Path) -> Result<(), NnError> {
        let header = CheckpointHeader {
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|(name, data)| BlockEntry {
                    name: name.clone(),
                    len: data.len(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for (_, data) in &self.blocks {
            for v in data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, NnError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::MalformedCheckpoint("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for entry in &header.blocks {
            let mut data = vec![0.0f64; entry.len];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                file.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            blocks.push((entry.name.clone(), data));
        }
        Ok(Self {
            meta: header.meta,
            blocks,
        })
    }
}
