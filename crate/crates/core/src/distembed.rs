//! Learned per-cohort quantile functions.
//!
//! Each cohort owns an embedding row; a shared MLP maps it to `K` logits,
//! softplus turns those into positive increments and a cumulative sum gives
//! strictly increasing breakpoints. Training minimises the pinball loss on
//! the grid `tau_k = k / (K + 1)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DurationBinner, InteractionRecord};
use crate::ecdf::{ClusterMap, CohortKey, CohortKind, QuantileSource};
use crate::nn::{self, Adam, EarlyStopping, EpochStats, Mlp, Trace, TrainingConfig, Verdict};
use crate::{par, seed, RadError, Result};

const MODEL_MAGIC: &[u8; 8] = b"RADMQNT\0";
const MODEL_VERSION: u32 = 1;
/// Cohorts per gradient chunk inside a mini-batch.
const COHORTS_PER_CHUNK: usize = 8;
/// Added to every softplus increment so breakpoints stay strictly increasing
/// in floating point when a logit is very negative.
pub const DELTA_FLOOR: f64 = 1e-9;

/// Quantile level assigned to the `k`-th breakpoint by [`MultiquantileModel::quantile_of_learned`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelGrid {
    /// `k / (K + 1)`, the grid the loss is trained on.
    #[default]
    Shifted,
    /// `k / K`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiquantileConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub breakpoints: usize,
    pub label_grid: LabelGrid,
    /// Interpolate linearly between breakpoints instead of stepping.
    pub interpolate: bool,
}

impl Default for MultiquantileConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![64, 64, 64],
            breakpoints: 100,
            label_grid: LabelGrid::Shifted,
            interpolate: false,
        }
    }
}

impl MultiquantileConfig {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.breakpoints == 0 || self.hidden.contains(&0) {
            return Err(RadError::Config(format!("invalid multiquantile config {self:?}")));
        }
        Ok(())
    }
}

/// Quantile levels `k / (K + 1)` for `k = 1..=K`.
pub fn tau_grid(k: usize) -> Vec<f64> {
    (1..=k).map(|j| j as f64 / (k + 1) as f64).collect()
}

/// Cumulative sums of `deltas`.
pub fn cumulative_breakpoints(deltas: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    deltas
        .iter()
        .map(|d| {
            acc += d;
            acc
        })
        .collect()
}

/// Breakpoints from raw logits: softplus plus [`DELTA_FLOOR`], cumulative sum, then `scale`.
pub fn breakpoints_from_logits(logits: &[f64], scale: f64) -> Vec<f64> {
    let deltas: Vec<f64> = logits.iter().map(|&l| nn::softplus(l) + DELTA_FLOOR).collect();
    cumulative_breakpoints(&deltas).into_iter().map(|b| b * scale).collect()
}

/// Mean pinball loss of `y` against `breakpoints` on the `k / (K + 1)` grid.
pub fn pinball_loss(breakpoints: &[f64], y: f64) -> f64 {
    let k = breakpoints.len();
    if k == 0 {
        return 0.0;
    }
    let denom = (k + 1) as f64;
    breakpoints
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let tau = (j + 1) as f64 / denom;
            tau * (y - b).max(0.0) + (1.0 - tau) * (b - y).max(0.0)
        })
        .sum::<f64>()
        / k as f64
}

/// Summed pinball loss of sorted `ys` and its gradient with respect to each breakpoint.
///
/// `prefix[i]` is the sum of the first `i` values of `ys`.
fn cohort_loss(ys: &[f64], prefix: &[f64], b: &[f64], d_b: Option<&mut [f64]>) -> f64 {
    let k = b.len();
    let denom = (k + 1) as f64;
    let total = prefix[ys.len()];
    let mut loss = 0.0;
    let mut d_b = d_b;
    for (j, &bj) in b.iter().enumerate() {
        let tau = (j + 1) as f64 / denom;
        let lt = ys.partition_point(|&y| y < bj);
        let le = ys.partition_point(|&y| y <= bj);
        let gt = ys.len() - le;
        let sum_lt = prefix[lt];
        let sum_gt = total - prefix[le];
        loss += tau * (sum_gt - gt as f64 * bj) + (1.0 - tau) * (lt as f64 * bj - sum_lt);
        if let Some(g) = d_b.as_deref_mut() {
            g[j] = (1.0 - tau) * lt as f64 - tau * gt as f64;
        }
    }
    loss / k as f64
}

fn prefix_sums(ys: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(ys.len() + 1);
    p.push(0.0);
    let mut acc = 0.0;
    for y in ys {
        acc += y;
        p.push(acc);
    }
    p
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    cohorts: Vec<CohortKey>,
    support: Vec<usize>,
    embed_dim: usize,
    layer_sizes: Vec<usize>,
    breakpoints: usize,
    scale: f64,
    label_grid: LabelGrid,
    interpolate: bool,
}

/// Embedding table plus shared MLP; see the module docs.
#[derive(Debug, Clone)]
pub struct MultiquantileModel {
    cohorts: Vec<CohortKey>,
    index: HashMap<CohortKey, usize>,
    support: Vec<usize>,
    embed_dim: usize,
    k: usize,
    mlp: Mlp,
    /// Watch-time units per unit of breakpoint output.
    scale: f64,
    label_grid: LabelGrid,
    interpolate: bool,
    params: Vec<f64>,
}

impl MultiquantileModel {
    /// Fresh model over `cohorts` with `support[i]` training samples each.
    pub fn new(
        cohorts: Vec<CohortKey>,
        support: Vec<usize>,
        scale: f64,
        cfg: &MultiquantileConfig,
        seed_root: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cohorts.is_empty() {
            return Err(RadError::EmptyInput("no cohorts to embed".into()));
        }
        if support.len() != cohorts.len() {
            return Err(RadError::invalid("support length differs from cohort count"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(RadError::invalid(format!("scale {scale} must be positive")));
        }
        let mut sizes = vec![cfg.embed_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.breakpoints);
        let mlp = Mlp::new(sizes);
        let n_emb = cohorts.len() * cfg.embed_dim;
        let mut params = vec![0.0; n_emb + mlp.param_count()];
        let mut rng = seed::rng(seed_root, "distembed.init", 0);
        let normal = Normal::new(0.0, 0.5).expect("finite sd");
        for p in &mut params[..n_emb] {
            *p = normal.sample(&mut rng);
        }
        mlp.init(&mut params[n_emb..], &mut rng);
        // Start with evenly spaced breakpoints reaching twice the scale.
        let start = nn::softplus_inverse(2.0 / cfg.breakpoints as f64);
        for b in mlp.output_bias_mut(&mut params[n_emb..]) {
            *b = start;
        }
        let index = cohorts.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(Self {
            cohorts,
            index,
            support,
            embed_dim: cfg.embed_dim,
            k: cfg.breakpoints,
            mlp,
            scale,
            label_grid: cfg.label_grid,
            interpolate: cfg.interpolate,
            params,
        })
    }

    pub fn cohorts(&self) -> &[CohortKey] {
        &self.cohorts
    }

    pub fn breakpoint_count(&self) -> usize {
        self.k
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_label_rule(&mut self, grid: LabelGrid, interpolate: bool) {
        self.label_grid = grid;
        self.interpolate = interpolate;
    }

    fn emb_len(&self) -> usize {
        self.cohorts.len() * self.embed_dim
    }

    fn cohort_index(&self, cohort: &CohortKey) -> Result<usize> {
        self.index
            .get(cohort)
            .copied()
            .ok_or_else(|| RadError::UnknownCohort(cohort.to_string()))
    }

    /// Normalised breakpoints of cohort row `c`, with the logits and trace kept for backprop.
    fn forward_row(&self, c: usize, trace: &mut Trace) -> (Vec<f64>, Vec<f64>) {
        let e = &self.params[c * self.embed_dim..(c + 1) * self.embed_dim];
        self.mlp.forward(&self.params[self.emb_len()..], e, trace);
        let logits = trace.output().to_vec();
        (breakpoints_from_logits(&logits, 1.0), logits)
    }

    /// Breakpoints of `cohort` in watch-time units.
    pub fn breakpoints(&self, cohort: &CohortKey) -> Result<Vec<f64>> {
        let c = self.cohort_index(cohort)?;
        let (b, _) = self.forward_row(c, &mut Trace::default());
        Ok(b.into_iter().map(|v| v * self.scale).collect())
    }

    pub fn quantile_of_learned(&self, cohort: &CohortKey, s: f64) -> Result<f64> {
        let b = self.breakpoints(cohort)?;
        Ok(learned_quantile(&b, s, self.label_grid, self.interpolate))
    }

    /// Breakpoints of every cohort, evaluated once, for bulk labelling.
    pub fn snapshot(&self) -> LearnedQuantiles {
        let rows = par::map_range(self.cohorts.len(), |c| {
            let (b, _) = self.forward_row(c, &mut Trace::default());
            b.into_iter().map(|v| v * self.scale).collect::<Vec<f64>>()
        });
        LearnedQuantiles {
            label_grid: self.label_grid,
            interpolate: self.interpolate,
            table: self
                .cohorts
                .iter()
                .zip(rows)
                .zip(&self.support)
                .map(|((c, b), &n)| (*c, (b, n)))
                .collect(),
        }
    }

    /// Loss and gradient of one cohort's sorted, normalised samples.
    /// The gradient is added into `grad_mlp` and `grad_emb`. Returns the summed loss.
    fn cohort_step(
        &self,
        c: usize,
        ys: &[f64],
        weight: f64,
        grad_mlp: &mut [f64],
        grad_emb: &mut [f64],
        trace: &mut Trace,
    ) -> f64 {
        let (b, logits) = self.forward_row(c, trace);
        let prefix = prefix_sums(ys);
        let mut d_b = vec![0.0; self.k];
        let loss = cohort_loss(ys, &prefix, &b, Some(&mut d_b));
        // d/d delta_j = sum over k >= j of d/d b_k; then through softplus.
        let scale = weight / self.k as f64;
        let mut acc = 0.0;
        let mut d_logits = vec![0.0; self.k];
        for j in (0..self.k).rev() {
            acc += d_b[j];
            d_logits[j] = acc * scale * nn::sigmoid(logits[j]);
        }
        self.mlp
            .backward(&self.params[self.emb_len()..], trace, &d_logits, grad_mlp, Some(grad_emb));
        loss
    }

    /// Mean pinball loss (normalised units) of `batch` and its exact gradient.
    ///
    /// `batch` holds `(cohort row, normalised watch time)` pairs.
    fn batch_gradient(&self, batch: &mut [(usize, f64)]) -> (f64, Vec<f64>) {
        batch.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        let mut start = 0;
        for i in 1..=batch.len() {
            if i == batch.len() || batch[i].0 != batch[start].0 {
                runs.push((batch[start].0, start, i));
                start = i;
            }
        }
        let n = batch.len() as f64;
        let batch_ref: &[(usize, f64)] = batch;
        let n_mlp = self.mlp.param_count();
        let chunks = par::map_chunks(&runs, COHORTS_PER_CHUNK, |chunk| {
            let mut grad_mlp = vec![0.0; n_mlp];
            let mut emb = Vec::with_capacity(chunk.len());
            let mut trace = Trace::default();
            let mut loss = 0.0;
            for &(c, lo, hi) in chunk {
                let ys: Vec<f64> = batch_ref[lo..hi].iter().map(|p| p.1).collect();
                let mut g_e = vec![0.0; self.embed_dim];
                loss += self.cohort_step(c, &ys, 1.0 / n, &mut grad_mlp, &mut g_e, &mut trace);
                emb.push((c, g_e));
            }
            (loss, grad_mlp, emb)
        });
        let emb_len = self.emb_len();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g_mlp, emb) in chunks {
            loss += l;
            for (dst, src) in grad[emb_len..].iter_mut().zip(&g_mlp) {
                *dst += src;
            }
            for (c, g_e) in emb {
                for (dst, src) in grad[c * self.embed_dim..(c + 1) * self.embed_dim].iter_mut().zip(&g_e) {
                    *dst += src;
                }
            }
        }
        (loss / n, grad)
    }

    /// Mean pinball loss, in normalised units, of raw `(cohort, watch time)` samples.
    pub fn objective(&self, samples: &[(CohortKey, f64)]) -> Result<f64> {
        Ok(self.loss_and_gradient(samples)?.0)
    }

    /// Training objective on `samples` and its analytic gradient over [`Self::params`].
    pub fn loss_and_gradient(&self, samples: &[(CohortKey, f64)]) -> Result<(f64, Vec<f64>)> {
        if samples.is_empty() {
            return Err(RadError::EmptyInput("no samples".into()));
        }
        let mut batch = samples
            .iter()
            .map(|(c, y)| Ok((self.cohort_index(c)?, y / self.scale)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.batch_gradient(&mut batch))
    }

    /// Mean pinball loss in watch-time units over grouped, normalised samples.
    fn grouped_loss(&self, groups: &[(usize, Vec<f64>, Vec<f64>)], total: usize) -> f64 {
        if total == 0 {
            return f64::NAN;
        }
        let sums = par::map(groups, |(c, ys, prefix)| {
            let (b, _) = self.forward_row(*c, &mut Trace::default());
            cohort_loss(ys, prefix, &b, None)
        });
        sums.iter().sum::<f64>() / total as f64 * self.scale
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            cohorts: self.cohorts.clone(),
            support: self.support.clone(),
            embed_dim: self.embed_dim,
            layer_sizes: self.mlp.sizes().to_vec(),
            breakpoints: self.k,
            scale: self.scale,
            label_grid: self.label_grid,
            interpolate: self.interpolate,
        };
        nn::write_model_file(path, MODEL_MAGIC, MODEL_VERSION, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (ModelHeader, Vec<f64>) = nn::read_model_file(path, MODEL_MAGIC, MODEL_VERSION)?;
        let bad = |reason: &str| RadError::BadArtifact {
            path: path.into(),
            reason: reason.into(),
        };
        if h.layer_sizes.len() < 2 || h.layer_sizes[0] != h.embed_dim || *h.layer_sizes.last().unwrap() != h.breakpoints {
            return Err(bad("layer sizes disagree with header"));
        }
        let mlp = Mlp::new(h.layer_sizes);
        if params.len() != h.cohorts.len() * h.embed_dim + mlp.param_count() || h.support.len() != h.cohorts.len() {
            return Err(bad("parameter count disagrees with header"));
        }
        let index = h.cohorts.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(Self {
            cohorts: h.cohorts,
            index,
            support: h.support,
            embed_dim: h.embed_dim,
            k: h.breakpoints,
            mlp,
            scale: h.scale,
            label_grid: h.label_grid,
            interpolate: h.interpolate,
            params,
        })
    }
}

/// Quantile of `s` against increasing breakpoints `b`.
pub fn learned_quantile(b: &[f64], s: f64, grid: LabelGrid, interpolate: bool) -> f64 {
    let k = b.len();
    let denom = match grid {
        LabelGrid::Shifted => (k + 1) as f64,
        LabelGrid::Literal => k as f64,
    };
    let top = 1.0 - 1.0 / (2.0 * denom);
    let bottom = 1.0 / (2.0 * denom);
    // First breakpoint at or above s, 0-based.
    let j = b.partition_point(|&bj| bj < s);
    if j == k {
        return top;
    }
    let q = if interpolate {
        let (b0, t0) = if j == 0 { (0.0, 0.0) } else { (b[j - 1], j as f64 / denom) };
        let t1 = (j + 1) as f64 / denom;
        if b[j] > b0 {
            t0 + (t1 - t0) * ((s - b0) / (b[j] - b0)).clamp(0.0, 1.0)
        } else {
            t1
        }
    } else {
        (j + 1) as f64 / denom
    };
    q.clamp(bottom, top)
}

/// Watch time at level `q`, linear between `(0, 0)` and the `(tau_k, b_k)` points.
pub fn learned_inverse(b: &[f64], q: f64, grid: LabelGrid) -> f64 {
    let k = b.len();
    if k == 0 {
        return 0.0;
    }
    let denom = match grid {
        LabelGrid::Shifted => (k + 1) as f64,
        LabelGrid::Literal => k as f64,
    };
    let pos = q * denom;
    if pos <= 0.0 {
        return 0.0;
    }
    if pos >= k as f64 {
        return b[k - 1];
    }
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let b_lo = if lo == 0 { 0.0 } else { b[lo - 1] };
    b_lo + frac * (b[lo] - b_lo)
}

/// Breakpoints of every cohort, precomputed from a trained model.
#[derive(Debug, Clone)]
pub struct LearnedQuantiles {
    pub label_grid: LabelGrid,
    pub interpolate: bool,
    /// Cohort to breakpoints and training support.
    pub table: BTreeMap<CohortKey, (Vec<f64>, usize)>,
}

impl QuantileSource for LearnedQuantiles {
    fn quantile(&self, key: &CohortKey, s: f64) -> Option<(f64, usize)> {
        let (b, n) = self.table.get(key)?;
        Some((learned_quantile(b, s, self.label_grid, self.interpolate), *n))
    }

    fn inverse(&self, key: &CohortKey, q: f64) -> Option<f64> {
        let (b, _) = self.table.get(key)?;
        Some(learned_inverse(b, q, self.label_grid))
    }
}

/// Watch times of `records` grouped by their cohort under `kind`.
/// Records without a resolvable cohort are dropped.
pub fn cohort_samples(
    records: &[InteractionRecord],
    kind: CohortKind,
    binner: Option<&DurationBinner>,
    clusters: Option<&ClusterMap>,
) -> BTreeMap<CohortKey, Vec<f64>> {
    let mut out: BTreeMap<CohortKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(key) = CohortKey::for_record(kind, r, binner, clusters) {
            out.entry(key).or_default().push(r.watch_time);
        }
    }
    out
}

/// Trained model with its loss curve.
#[derive(Debug, Clone)]
pub struct TrainedMultiquantile {
    pub model: MultiquantileModel,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Validation (or training, when no validation data) loss before the first update.
    pub initial_loss: f64,
}

/// Cohort row index, scaled sorted samples and their prefix sums.
type Group = (usize, Vec<f64>, Vec<f64>);

fn grouped(model: &MultiquantileModel, samples: &BTreeMap<CohortKey, Vec<f64>>) -> (Vec<Group>, usize) {
    let mut total = 0;
    let groups = samples
        .iter()
        .filter_map(|(key, ys)| {
            let c = *model.index.get(key)?;
            let mut ys: Vec<f64> = ys.iter().map(|y| y / model.scale).collect();
            ys.sort_by(f64::total_cmp);
            total += ys.len();
            let prefix = prefix_sums(&ys);
            Some((c, ys, prefix))
        })
        .collect();
    (groups, total)
}

/// Fits a model to `train` (cohort to watch times), early-stopping on `validation`.
///
/// Validation cohorts unseen in training are ignored. With no usable
/// validation samples the training loss drives early stopping.
pub fn train(
    train: &BTreeMap<CohortKey, Vec<f64>>,
    validation: &BTreeMap<CohortKey, Vec<f64>>,
    cfg: &MultiquantileConfig,
    tcfg: &TrainingConfig,
) -> Result<TrainedMultiquantile> {
    tcfg.validate()?;
    let train: BTreeMap<CohortKey, Vec<f64>> =
        train.iter().filter(|(_, v)| !v.is_empty()).map(|(k, v)| (*k, v.clone())).collect();
    let n_train: usize = train.values().map(Vec::len).sum();
    if n_train == 0 {
        return Err(RadError::EmptyInput("no training samples for the quantile model".into()));
    }
    let mean = train.values().flatten().sum::<f64>() / n_train as f64;
    let scale = if mean > 0.0 { mean } else { 1.0 };
    let cohorts: Vec<CohortKey> = train.keys().copied().collect();
    let support: Vec<usize> = train.values().map(Vec::len).collect();
    let mut model = MultiquantileModel::new(cohorts, support, scale, cfg, tcfg.seed)?;

    let samples: Vec<(usize, f64)> = train
        .values()
        .enumerate()
        .flat_map(|(c, ys)| ys.iter().map(move |&y| (c, y / scale)))
        .collect();
    let (train_groups, _) = grouped(&model, &train);
    let (val_groups, n_val) = grouped(&model, validation);
    let use_val = n_val > 0;
    let monitor = |m: &MultiquantileModel| {
        if use_val {
            m.grouped_loss(&val_groups, n_val)
        } else {
            m.grouped_loss(&train_groups, n_train)
        }
    };

    let initial = monitor(&model);
    let mut stopper = EarlyStopping::new(tcfg.early_stop_patience, initial, &model.params);
    let mut adam = Adam::new(model.params.len(), tcfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::new();
    for epoch in 1..=tcfg.max_epochs {
        let mut rng = seed::rng(tcfg.seed, "distembed.shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(tcfg.batch_size) {
            let mut batch: Vec<(usize, f64)> = idx.iter().map(|&i| samples[i]).collect();
            let (loss, grad) = model.batch_gradient(&mut batch);
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        let train_loss = loss_sum / samples.len() as f64 * scale;
        let stats = EpochStats {
            epoch,
            train_loss,
            validation_loss: if use_val { monitor(&model) } else { model.grouped_loss(&train_groups, n_train) },
        };
        log::info!(
            "quantile model epoch {epoch}: train {:.4} validation {:.4}",
            stats.train_loss,
            stats.validation_loss
        );
        curve.push(stats);
        if let Verdict::Stop = stopper.observe(&stats, &model.params)? {
            break;
        }
    }
    model.params.copy_from_slice(&stopper.best_params);
    Ok(TrainedMultiquantile {
        model,
        curve,
        best_epoch: stopper.best_epoch,
        initial_loss: initial,
    })
}

/// Distance of one cohort's held-out samples to the training ECDF and to the
/// learned breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFit {
    pub cohort: CohortKey,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub w1_ecdf: f64,
    pub w1_learned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub kind: CohortKind,
    pub min_support: usize,
    pub cohorts: Vec<CohortFit>,
    /// Mean over cohorts of the train-ECDF distance; the floor a learned model is judged against.
    pub mean_w1_ecdf: f64,
    pub mean_w1_learned: f64,
    /// `mean_w1_learned / mean_w1_ecdf`.
    pub ratio: f64,
}

/// Compares learned breakpoints and training ECDFs with held-out samples.
///
/// Only cohorts with at least `min_support` training samples, some held-out
/// samples and a learned row take part. Breakpoints are treated as an
/// equally weighted `K`-point sample.
pub fn fit_against_heldout(
    learned: &LearnedQuantiles,
    train: &BTreeMap<CohortKey, Vec<f64>>,
    heldout: &BTreeMap<CohortKey, Vec<f64>>,
    kind: CohortKind,
    min_support: usize,
) -> Result<FitSummary> {
    type Eligible<'a> = (&'a CohortKey, &'a Vec<f64>, &'a Vec<f64>, &'a Vec<f64>);
    let eligible: Vec<Eligible> = train
        .iter()
        .filter(|(k, v)| k.kind == kind && v.len() >= min_support)
        .filter_map(|(k, v)| {
            let h = heldout.get(k).filter(|h| !h.is_empty())?;
            let (b, _) = learned.table.get(k)?;
            Some((k, v, h, b))
        })
        .collect();
    if eligible.is_empty() {
        return Err(RadError::EmptyInput(format!(
            "no {} cohort has {min_support} training samples and held-out data",
            kind.name()
        )));
    }
    let cohorts = par::map(&eligible, |(k, t, h, b)| -> Result<CohortFit> {
        Ok(CohortFit {
            cohort: **k,
            train_samples: t.len(),
            heldout_samples: h.len(),
            w1_ecdf: crate::metrics::wasserstein1(t, h)?,
            w1_learned: crate::metrics::wasserstein1(b, h)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = cohorts.len() as f64;
    let mean_w1_ecdf = cohorts.iter().map(|c| c.w1_ecdf).sum::<f64>() / n;
    let mean_w1_learned = cohorts.iter().map(|c| c.w1_learned).sum::<f64>() / n;
    Ok(FitSummary {
        kind,
        min_support,
        cohorts,
        mean_w1_ecdf,
        mean_w1_learned,
        ratio: mean_w1_learned / mean_w1_ecdf,
    })
}
