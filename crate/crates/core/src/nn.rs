//! Small dense networks with hand-written gradients.
//!
//! Parameters live in flat `f64` slices owned by the model that uses the
//! network; [`Mlp`] only knows the layer sizes and how to walk the slice.
//! Hidden layers use ReLU, the output layer is linear.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{RadError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Per-layer activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// `sizes` lists the input width, every hidden width, then the output width.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        Self { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `l`'s weight matrix (row-major, `out x in`); its bias follows.
    fn offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// He-normal weights for ReLU layers, Glorot-normal for the output layer, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let sd = if l + 1 < self.layers() {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / (fan_in + fan_out) as f64).sqrt()
            };
            let normal = Normal::new(0.0, sd).expect("finite sd");
            let off = self.offset(l);
            for w in &mut params[off..off + fan_in * fan_out] {
                *w = normal.sample(rng);
            }
            for b in &mut params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out] {
                *b = 0.0;
            }
        }
    }

    /// Mutable view of the output layer's bias.
    pub fn output_bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        let l = self.layers() - 1;
        let off = self.offset(l) + self.sizes[l] * self.sizes[l + 1];
        &mut params[off..off + self.sizes[l + 1]]
    }

    pub fn forward(&self, params: &[f64], input: &[f64], trace: &mut Trace) {
        debug_assert_eq!(input.len(), self.input_dim());
        trace.acts.resize(self.sizes.len(), Vec::new());
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let (w, b) = params[off..off + n_in * n_out + n_out].split_at(n_in * n_out);
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.clear();
            let hidden = l + 1 < self.layers();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    s += wi * xi;
                }
                y.push(if hidden && s < 0.0 { 0.0 } else { s });
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given `d_out = dL/d(output)`.
    /// When `d_input` is given it receives `dL/d(input)` (overwritten).
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        d_out: &[f64],
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let mut delta: Vec<f64> = d_out.to_vec();
        let mut prev: Vec<f64> = Vec::new();
        let mut d_input = d_input;
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let x = &trace.acts[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            let w = &params[off..off + n_in * n_out];
            prev.clear();
            prev.resize(n_in, 0.0);
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            if l == 0 {
                if let Some(di) = d_input.take() {
                    di.copy_from_slice(&prev);
                }
                break;
            }
            // ReLU derivative, read off the stored post-activation.
            for (p, a) in prev.iter_mut().zip(x) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut prev);
        }
    }
}

/// Adaptive-moment optimiser over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainingConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Optimiser and schedule settings shared by every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 50,
            early_stop_patience: 5,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.max_epochs > 0
            && self.early_stop_patience > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RadError::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Tracks the best validation loss and its parameters.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStopping {
    patience: usize,
    initial: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best_params: Vec<f64>,
    since_best: usize,
}

pub(crate) enum Verdict {
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, initial_loss: f64, params: &[f64]) -> Self {
        Self {
            patience,
            initial: initial_loss,
            best_loss: initial_loss,
            best_epoch: 0,
            best_params: params.to_vec(),
            since_best: 0,
        }
    }

    pub fn observe(&mut self, stats: &EpochStats, params: &[f64]) -> Result<Verdict> {
        let worst = stats.train_loss.max(stats.validation_loss);
        if !worst.is_finite() || worst > 10.0 * self.initial {
            return Err(RadError::Diverged {
                epoch: stats.epoch,
                loss: worst,
                initial: self.initial,
            });
        }
        if stats.validation_loss < self.best_loss {
            self.best_loss = stats.validation_loss;
            self.best_epoch = stats.epoch;
            self.best_params.copy_from_slice(params);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(if self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        })
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Writes a versioned binary model file: 8-byte magic, `u32` version, a
/// length-prefixed JSON header, then the parameters as little-endian `f64`.
pub(crate) fn write_model_file<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    header: &H,
    params: &[f64],
) -> Result<()> {
    let file = File::create(path).map_err(|e| RadError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_vec(header)?;
    let io = |e| RadError::io(path, e);
    w.write_all(magic).map_err(io)?;
    w.write_all(&version.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for p in params {
        w.write_all(&p.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn read_model_file<H: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<(H, Vec<f64>)> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| RadError::BadArtifact {
        path: path.into(),
        reason: reason.into(),
    };
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(|_| bad("truncated magic"))?;
    if &m != magic {
        return Err(bad("wrong file type"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
    if u32::from_le_bytes(b4) != version {
        return Err(bad(&format!("unsupported version {}", u32::from_le_bytes(b4))));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: H = serde_json::from_slice(&header)?;
    r.read_exact(&mut b8).map_err(|_| bad("truncated parameter count"))?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8).map_err(|_| bad("truncated parameters"))?;
        params.push(f64::from_le_bytes(b8));
    }
    Ok((header, params))
}
