//! Fully connected softmax classifiers.
//!
//! Hidden layers use the rectifier. The last layer is affine and its output
//! `g(x)` is the logit vector; `softmax(g(x))` is the class PMF.
//!
//! Last-layer parameters are flattened as the weight matrix column by column
//! (one column per output unit, `h` entries each) followed by the `M` biases,
//! so `d = (h + 1)·M`. Every covariance over last-layer parameters uses this
//! order.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! | field            | type                                        |
//! |------------------|---------------------------------------------|
//! | magic            | 8 bytes `b"LLAMLP\0\x01"`                   |
//! | version          | `u32` (= 1)                                 |
//! | width count `n`  | `u32`                                       |
//! | widths           | `n × u32` (input, hidden…, classes)         |
//! | activation       | `u32` length + UTF-8 name (`"relu"`)        |
//! | training seed    | `u64`                                       |
//! | parameter count  | `u64`                                       |
//! | parameters       | `f64` each: per layer, weights column-major (`in × out`), then biases |

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, rng};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LLAMLP\0\x01";
const CHECKPOINT_VERSION: u32 = 1;

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest element, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `g − g_k` where `k` is the (lowest-index) maximiser, so the maximum is
/// exactly zero and every entry is non-positive.
pub fn shift_logits(g: &DVector<f64>) -> DVector<f64> {
    let k = argmax(g.as_slice());
    let top = g[k];
    g.map(|v| v - top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`; column `j` holds the weights into output unit `j`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
    activation: Activation,
    seed: u64,
}

fn relu_inplace(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.max(0.0));
}

fn add_bias_rows(m: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(bias[j]);
    }
}

impl MlpClassifier {
    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::contract(format!(
                "layer widths {layer_dims:?} need an input and an output and no zero widths"
            )));
        }
        Ok(())
    }

    /// Model with every weight and bias zero.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| DenseLayer {
                weights: DMatrix::zeros(w[0], w[1]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(MlpClassifier {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation: Activation::Relu,
            seed: 0,
        })
    }

    /// He-normal weights and zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        model.seed = seed;
        let mut r = rng(seed);
        for layer in &mut model.layers {
            let std = (2.0 / layer.weights.nrows() as f64).sqrt();
            fill_standard_normal(&mut r, layer.weights.as_mut_slice());
            layer.weights *= std;
        }
        Ok(model)
    }

    pub fn from_params(layer_dims: &[usize], activation: Activation, params: &[f64], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        model.activation = activation;
        model.seed = seed;
        if params.len() != model.param_count() {
            return Err(Error::Dimension {
                expected: model.param_count(),
                got: params.len(),
            });
        }
        let mut at = 0;
        for layer in &mut model.layers {
            let nw = layer.weights.len();
            layer.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = layer.bias.len();
            layer.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(model)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(layer.bias.as_slice());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width `h` of the input to the last layer.
    pub fn penultimate_width(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    /// `d = (h + 1)·M`.
    pub fn last_layer_param_count(&self) -> usize {
        (self.penultimate_width() + 1) * self.num_classes()
    }

    fn last(&self) -> &DenseLayer {
        self.layers.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Input to the last layer, `a(x)`.
    pub fn penultimate(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut a = DVector::from_column_slice(x);
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = layer.weights.tr_mul(&a);
            z += &layer.bias;
            z.apply(|v| *v = v.max(0.0));
            a = z;
        }
        Ok(a)
    }

    /// Logits from a penultimate activation and flattened last-layer
    /// parameters.
    pub fn logits_from_penultimate(&self, a: &DVector<f64>, theta_last: &[f64]) -> DVector<f64> {
        let h = self.penultimate_width();
        let m = self.num_classes();
        DVector::from_fn(m, |j, _| {
            let w = &theta_last[j * h..(j + 1) * h];
            w.iter().zip(a.iter()).map(|(w, a)| w * a).sum::<f64>() + theta_last[h * m + j]
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        let a = self.penultimate(x)?;
        let last = self.last();
        let mut z = last.weights.tr_mul(&a);
        z += &last.bias;
        Ok(z)
    }

    pub fn shifted_logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(shift_logits(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(self.shifted_logits(x)?.as_slice()))
    }

    pub fn last_layer_params(&self) -> DVector<f64> {
        let last = self.last();
        let mut v = Vec::with_capacity(self.last_layer_param_count());
        v.extend_from_slice(last.weights.as_slice());
        v.extend_from_slice(last.bias.as_slice());
        DVector::from_vec(v)
    }

    pub fn with_last_layer_params(&self, theta_last: &[f64]) -> Result<Self> {
        if theta_last.len() != self.last_layer_param_count() {
            return Err(Error::Dimension {
                expected: self.last_layer_param_count(),
                got: theta_last.len(),
            });
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().unwrap();
        let nw = last.weights.len();
        last.weights.as_mut_slice().copy_from_slice(&theta_last[..nw]);
        last.bias.as_mut_slice().copy_from_slice(&theta_last[nw..]);
        Ok(out)
    }

    /// `d × M` matrix whose column `m` is `∂g_m/∂θ_last`: the penultimate
    /// activation in output `m`'s weight block, a one at bias `m`, zero
    /// elsewhere.
    pub fn last_layer_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let a = self.penultimate(x)?;
        Ok(jacobian_from_penultimate(&a, self.num_classes()))
    }

    /// Penultimate activations for many inputs, one row per input.
    pub fn penultimate_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let mut a = inputs.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = &a * &layer.weights;
            add_bias_rows(&mut z, &layer.bias);
            relu_inplace(&mut z);
            a = z;
        }
        Ok(a)
    }

    /// Logits for many inputs, one row per input.
    pub fn logits_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let a = self.penultimate_batch(inputs)?;
        let last = self.last();
        let mut z = a * &last.weights;
        add_bias_rows(&mut z, &last.bias);
        Ok(z)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.params();
        let mut out = Vec::with_capacity(64 + 8 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &w in &self.layer_dims {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        let name = self.activation.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("not a model checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let n = r.u32()? as usize;
        let dims = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| e.to_string())?;
        let activation = Activation::from_name(name).ok_or_else(|| format!("unknown activation {name:?}"))?;
        let seed = r.u64()?;
        let count = r.u64()? as usize;
        let params = (0..count).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        if !r.is_done() {
            return Err("trailing bytes after parameters".into());
        }
        MlpClassifier::from_params(&dims, activation, &params, seed).map_err(|e| e.to_string())
    }
}

/// Last-layer Jacobian for a known penultimate activation.
pub fn jacobian_from_penultimate(a: &DVector<f64>, num_classes: usize) -> DMatrix<f64> {
    let h = a.len();
    let m = num_classes;
    let mut j = DMatrix::zeros((h + 1) * m, m);
    for out in 0..m {
        for i in 0..h {
            j[(out * h + i, out)] = a[i];
        }
        j[(h * m + out, out)] = 1.0;
    }
    j
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.at + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.at));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Mini-batch Adam settings and the isotropic Gaussian prior `N(0, σ₀²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// σ₀²; the prior contributes `‖θ‖² / (2σ₀²)` to the negative log posterior.
    pub prior_variance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            prior_variance: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Negative log posterior per training item at the final parameters.
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
    pub steps: usize,
}

struct AdamState {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
}

fn rows_matrix(data: &LabeledSet, idx: &[usize]) -> DMatrix<f64> {
    let dim = data.dim();
    let mut buf = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        buf.extend_from_slice(data.input(i));
    }
    DMatrix::from_row_slice(idx.len(), dim, &buf)
}

/// Mean cross-entropy and argmax hits of logit rows against labels.
fn batch_ce(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut hits = 0;
    let mut row = vec![0.0; logits.ncols()];
    for (r, &y) in labels.iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = logits[(r, j)];
        }
        loss += log_sum_exp(&row) - row[y];
        if argmax(&row) == y {
            hits += 1;
        }
    }
    (loss, hits)
}

/// Mean negative log posterior per item and accuracy of `model` on `data`.
pub fn evaluate_objective(model: &MlpClassifier, data: &LabeledSet, prior_variance: f64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(1024) {
        let logits = model.logits_batch(&rows_matrix(data, chunk))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
        let (l, h) = batch_ce(&logits, &labels);
        loss += l;
        hits += h;
    }
    let n = data.len() as f64;
    let sq: f64 = model.params().iter().map(|p| p * p).sum();
    Ok((loss / n + sq / (2.0 * prior_variance * n), hits as f64 / n))
}

/// Maximum a posteriori training: minimizes
/// `−(1/N)·(Σₙ ln f_{yₙ}(xₙ|θ) − ‖θ‖²/(2σ₀²))` with mini-batch Adam.
///
/// `arch` lists every width from input to output.
pub fn train_map(data: &LabeledSet, arch: &[usize], cfg: &TrainConfig) -> Result<(MlpClassifier, TrainReport)> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::contract("epochs and batch_size must be >= 1"));
    }
    if !(cfg.prior_variance > 0.0) {
        return Err(Error::contract("prior variance must be > 0"));
    }
    if arch.first() != Some(&data.dim()) {
        return Err(Error::Dimension {
            expected: data.dim(),
            got: arch.first().copied().unwrap_or(0),
        });
    }
    if arch.last() != Some(&data.num_classes()) {
        return Err(Error::contract(format!(
            "output width {:?} does not match {} classes",
            arch.last(),
            data.num_classes()
        )));
    }

    let mut model = MlpClassifier::init(arch, cfg.seed)?;
    let mut shuffle_rng = rng(cfg.seed ^ 0x5348_5546_464C_4521);
    let n = data.len();
    let decay = 1.0 / (cfg.prior_variance * n as f64);
    let mut adam = AdamState {
        m: model
            .layers
            .iter()
            .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
            .collect(),
        v: model
            .layers
            .iter()
            .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
            .collect(),
        t: 0,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    let num_layers = model.layers.len();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let b = idx.len() as f64;
            let x = rows_matrix(data, idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();

            // forward, keeping every layer's input
            let mut acts = Vec::with_capacity(num_layers + 1);
            acts.push(x);
            for (k, layer) in model.layers.iter().enumerate() {
                let mut z = &acts[k] * &layer.weights;
                add_bias_rows(&mut z, &layer.bias);
                if k + 1 < num_layers {
                    relu_inplace(&mut z);
                }
                acts.push(z);
            }
            let logits = acts.pop().unwrap();
            let (ce, _) = batch_ce(&logits, &labels);
            if !ce.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }

            // dL/dlogits for the mean cross-entropy
            let mut dz = logits;
            let mut row = vec![0.0; dz.ncols()];
            for (r, &y) in labels.iter().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = dz[(r, j)];
                }
                let p = softmax(&row);
                for j in 0..row.len() {
                    dz[(r, j)] = (p[j] - if j == y { 1.0 } else { 0.0 }) / b;
                }
            }

            adam.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(adam.t);
            let bc2 = 1.0 - cfg.beta2.powi(adam.t);
            for k in (0..num_layers).rev() {
                let input = &acts[k];
                let layer = &model.layers[k];
                let mut gw = input.tr_mul(&dz);
                gw += &layer.weights * decay;
                let mut gb = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
                gb += &layer.bias * decay;
                if k > 0 {
                    let mut da = &dz * layer.weights.transpose();
                    da.zip_apply(input, |g, a| {
                        if a <= 0.0 {
                            *g = 0.0
                        }
                    });
                    dz = da;
                }

                let (mw, mb) = &mut adam.m[k];
                let (vw, vb) = &mut adam.v[k];
                let layer = &mut model.layers[k];
                adam_update(layer.weights.as_mut_slice(), gw.as_slice(), mw.as_mut_slice(), vw.as_mut_slice(), cfg, bc1, bc2);
                adam_update(layer.bias.as_mut_slice(), gb.as_slice(), mb.as_mut_slice(), vb.as_mut_slice(), cfg, bc1, bc2);
            }
            steps += 1;
            if model.layers.iter().any(|l| l.weights.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { epoch, batch });
            }
        }
    }

    let (final_loss, train_accuracy) = evaluate_objective(&model, data, cfg.prior_variance)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs - 1,
            batch: steps,
        });
    }
    Ok((
        model,
        TrainReport {
            final_loss,
            train_accuracy,
            epochs: cfg.epochs,
            steps,
        },
    ))
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &TrainConfig, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_blobs;

    #[test]
    fn zero_network_has_zero_logits() {
        let m = MlpClassifier::zeros(&[3, 4, 2]).unwrap();
        let g = m.logits(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn shift_examples() {
        let s = shift_logits(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        assert_eq!(s.as_slice(), &[0.0, -2.0, -1.0]);
        let s = shift_logits(&DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(s.as_slice(), &[0.0, 0.0]);
        let p = softmax(shift_logits(&DVector::from_vec(vec![700.0, 1.0, 699.0])).as_slice());
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_shape_and_zero_activation_pattern() {
        let m = MlpClassifier::zeros(&[2, 3, 2]).unwrap();
        let j = m.last_layer_jacobian(&[1.0, 1.0]).unwrap();
        assert_eq!((j.nrows(), j.ncols()), (8, 2));
        for r in 0..6 {
            assert_eq!(j.row(r).iter().copied().fold(0.0, f64::max), 0.0);
        }
        assert_eq!(j[(6, 0)], 1.0);
        assert_eq!(j[(7, 1)], 1.0);
        assert_eq!(j[(6, 1)], 0.0);
        assert_eq!(j[(7, 0)], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = MlpClassifier::zeros(&[3, 2]).unwrap();
        assert!(matches!(m.logits(&[1.0]), Err(Error::Dimension { expected: 3, got: 1 })));
    }

    #[test]
    fn last_layer_round_trip() {
        let m = MlpClassifier::init(&[3, 4, 2], 5).unwrap();
        let theta = m.last_layer_params();
        let back = m.with_last_layer_params(theta.as_slice()).unwrap();
        assert_eq!(back, m);
        let x = [0.1, 0.2, -0.3];
        let a = m.penultimate(&x).unwrap();
        let g1 = m.logits(&x).unwrap();
        let g2 = m.logits_from_penultimate(&a, theta.as_slice());
        assert!((g1 - g2).abs().max() < 1e-14);
    }

    #[test]
    fn batch_matches_single() {
        let m = MlpClassifier::init(&[3, 5, 4, 3], 2).unwrap();
        let xs = DMatrix::from_row_slice(2, 3, &[0.1, 0.4, -0.2, 1.0, -1.0, 0.5]);
        let batch = m.logits_batch(&xs).unwrap();
        for r in 0..2 {
            let x: Vec<f64> = xs.row(r).iter().copied().collect();
            let g = m.logits(&x).unwrap();
            for j in 0..3 {
                assert!((batch[(r, j)] - g[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MlpClassifier::init(&[4, 3, 2], 77).unwrap();
        let back = MlpClassifier::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.seed(), 77);
        let mut bad = m.to_bytes();
        bad[0] = b'X';
        assert!(MlpClassifier::from_bytes(&bad).is_err());
        assert!(MlpClassifier::from_bytes(&m.to_bytes()[..40]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = make_blobs(3, 30, 2, 6.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let (m1, r1) = train_map(&data, &[2, 8, 3], &cfg).unwrap();
        let (m2, r2) = train_map(&data, &[2, 8, 3], &cfg).unwrap();
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
        assert_eq!(m1, m2);
    }

    #[test]
    fn training_rejects_bad_arch() {
        let data = make_blobs(3, 5, 2, 6.0, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(train_map(&data, &[3, 8, 3], &cfg).is_err());
        assert!(train_map(&data, &[2, 8, 4], &cfg).is_err());
    }
}
