//! Stage-2 regressor from (user, video) identifiers to a debiased label, and
//! the maps from its predictions back to watch time.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::ecdf::{CohortKey, CohortKind, EmpiricalCdf, QuantileSource, RecordLabels};
use crate::fusion::{fuse, FusedQuantile, FusionWeights};
use crate::nn::{self, Adam, EarlyStopping, EpochStats, Mlp, Trace, TrainingConfig, Verdict};
use crate::{par, seed, RadError, Result};

const MODEL_MAGIC: &[u8; 8] = b"RADMLPR\0";
const MODEL_VERSION: u32 = 1;
const SAMPLES_PER_CHUNK: usize = 32;
/// Predicted quantiles are clamped to `[EPS, 1 - EPS]` before any inverse map.
pub const QUANTILE_EPS: f64 = 1e-6;

/// Target a regressor is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    RadV,
    RadU,
    D2q,
    Pcr,
    Raw,
}

impl LabelKind {
    pub const ALL: [LabelKind; 5] = [LabelKind::Raw, LabelKind::Pcr, LabelKind::D2q, LabelKind::RadU, LabelKind::RadV];

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::RadV => "rad_v",
            LabelKind::RadU => "rad_u",
            LabelKind::D2q => "d2q",
            LabelKind::Pcr => "pcr",
            LabelKind::Raw => "raw",
        }
    }

    /// Whether predictions live on the quantile scale.
    pub fn is_quantile(self) -> bool {
        matches!(self, LabelKind::RadV | LabelKind::RadU | LabelKind::D2q)
    }

    pub fn value(self, l: &RecordLabels) -> f64 {
        match self {
            LabelKind::RadV => l.q_video,
            LabelKind::RadU => l.q_user,
            LabelKind::D2q => l.q_d2q,
            LabelKind::Pcr => l.pcr,
            LabelKind::Raw => l.raw,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelKind {
    type Err = RadError;

    fn from_str(s: &str) -> Result<Self> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RadError::Config(format!("unknown label kind `{s}`")))
    }
}

/// Transform applied to raw watch-time targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RawTarget {
    /// Regress `ln(1 + S)` and exponentiate predictions.
    #[default]
    Log1p,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Also embed the categorical user features.
    pub use_features: bool,
    pub raw_target: RawTarget,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![64, 64, 64],
            use_features: false,
            raw_target: RawTarget::Log1p,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    kind: LabelKind,
    raw_target: RawTarget,
    users: Vec<u64>,
    videos: Vec<u64>,
    feature_cards: Vec<u32>,
    embed_dim: usize,
    layer_sizes: Vec<usize>,
    target_mean: f64,
    target_sd: f64,
}

/// Embedding rows used by one example; `None` marks an unseen id or code.
#[derive(Debug, Clone)]
struct Rows {
    slots: Vec<Option<usize>>,
}

/// Id-embedding MLP regressor with a scalar head.
#[derive(Debug, Clone)]
pub struct MlpRegressor {
    kind: LabelKind,
    raw_target: RawTarget,
    users: Vec<u64>,
    videos: Vec<u64>,
    user_index: HashMap<u64, usize>,
    video_index: HashMap<u64, usize>,
    /// Codes per feature slot; empty when features are unused.
    feature_cards: Vec<u32>,
    embed_dim: usize,
    mlp: Mlp,
    target_mean: f64,
    target_sd: f64,
    params: Vec<f64>,
}

impl MlpRegressor {
    fn build(
        kind: LabelKind,
        raw_target: RawTarget,
        users: Vec<u64>,
        videos: Vec<u64>,
        feature_cards: Vec<u32>,
        embed_dim: usize,
        hidden: &[usize],
    ) -> Self {
        let mut sizes = vec![(2 + feature_cards.len()) * embed_dim];
        sizes.extend(hidden);
        sizes.push(1);
        let mlp = Mlp::new(sizes);
        let user_index = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
        let video_index = videos.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let n = (users.len() + videos.len() + feature_cards.iter().map(|&c| c as usize).sum::<usize>()) * embed_dim
            + mlp.param_count();
        Self {
            kind,
            raw_target,
            users,
            videos,
            user_index,
            video_index,
            feature_cards,
            embed_dim,
            mlp,
            target_mean: 0.0,
            target_sd: 1.0,
            params: vec![0.0; n],
        }
    }

    /// Untrained model over the ids and feature codes seen in `records`.
    pub fn new(kind: LabelKind, records: &[InteractionRecord], cfg: &RegressorConfig, seed_root: u64) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.hidden.contains(&0) {
            return Err(RadError::Config(format!("invalid regressor config {cfg:?}")));
        }
        if records.is_empty() {
            return Err(RadError::EmptyInput("no training records for the regressor".into()));
        }
        let mut users: Vec<u64> = records.iter().map(|r| r.user_id).collect();
        users.sort_unstable();
        users.dedup();
        let mut videos: Vec<u64> = records.iter().map(|r| r.video_id).collect();
        videos.sort_unstable();
        videos.dedup();
        let feature_cards = if cfg.use_features {
            let slots = records[0].user_features.len();
            let mut cards = vec![0u32; slots];
            for r in records {
                if r.user_features.len() != slots {
                    return Err(RadError::invalid("records disagree on feature slot count"));
                }
                for (c, &f) in cards.iter_mut().zip(&r.user_features) {
                    *c = (*c).max(f + 1);
                }
            }
            cards
        } else {
            Vec::new()
        };
        let mut m = Self::build(kind, cfg.raw_target, users, videos, feature_cards, cfg.embed_dim, &cfg.hidden);
        let mut rng = seed::rng(seed_root, "preference.init", 0);
        let emb = m.emb_len();
        let normal = Normal::new(0.0, 0.1).expect("finite sd");
        for p in &mut m.params[..emb] {
            *p = normal.sample(&mut rng);
        }
        m.mlp.init(&mut m.params[emb..], &mut rng);
        Ok(m)
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn emb_len(&self) -> usize {
        self.params.len() - self.mlp.param_count()
    }

    /// Label value to regression target.
    pub fn encode(&self, label: f64) -> f64 {
        let t = match (self.kind, self.raw_target) {
            (LabelKind::Raw, RawTarget::Log1p) => label.max(0.0).ln_1p(),
            _ => label,
        };
        (t - self.target_mean) / self.target_sd
    }

    /// Network output to label value.
    pub fn decode(&self, out: f64) -> f64 {
        let t = out * self.target_sd + self.target_mean;
        match (self.kind, self.raw_target) {
            (LabelKind::Raw, RawTarget::Log1p) => t.exp_m1().max(0.0),
            _ => t,
        }
    }

    fn rows(&self, r: &InteractionRecord) -> Rows {
        let e = self.embed_dim;
        let mut slots = Vec::with_capacity(2 + self.feature_cards.len());
        slots.push(self.user_index.get(&r.user_id).map(|&i| i * e));
        let video_base = self.users.len() * e;
        slots.push(self.video_index.get(&r.video_id).map(|&i| video_base + i * e));
        let mut base = video_base + self.videos.len() * e;
        for (j, &card) in self.feature_cards.iter().enumerate() {
            slots.push(
                r.user_features
                    .get(j)
                    .filter(|&&code| code < card)
                    .map(|&code| base + code as usize * e),
            );
            base += card as usize * e;
        }
        Rows { slots }
    }

    fn input(&self, rows: &Rows, out: &mut Vec<f64>) {
        out.clear();
        for slot in &rows.slots {
            match slot {
                Some(off) => out.extend_from_slice(&self.params[*off..*off + self.embed_dim]),
                None => out.extend(std::iter::repeat_n(0.0, self.embed_dim)),
            }
        }
    }

    /// Raw network output (standardised target scale).
    fn output(&self, rows: &Rows, trace: &mut Trace, buf: &mut Vec<f64>) -> f64 {
        self.input(rows, buf);
        self.mlp.forward(&self.params[self.emb_len()..], buf, trace);
        trace.output()[0]
    }

    /// Predicted label value and whether any id or feature was unseen in training.
    pub fn predict(&self, r: &InteractionRecord) -> (f64, bool) {
        let rows = self.rows(r);
        let cold = rows.slots.iter().any(Option::is_none);
        let out = self.output(&rows, &mut Trace::default(), &mut Vec::new());
        (self.decode(out), cold)
    }

    pub fn predict_all(&self, records: &[InteractionRecord]) -> Vec<(f64, bool)> {
        par::map(records, |r| self.predict(r))
    }

    /// Summed squared error over `(rows, target)` pairs with gradients added to `grad`.
    fn chunk_gradient(&self, chunk: &[(Rows, f64)], weight: f64, grad: &mut Vec<(usize, f64)>, grad_mlp: &mut [f64]) -> f64 {
        let mut trace = Trace::default();
        let mut buf = Vec::new();
        let mut d_in = vec![0.0; self.mlp.input_dim()];
        let mut loss = 0.0;
        for (rows, t) in chunk {
            let y = self.output(rows, &mut trace, &mut buf);
            let err = y - t;
            loss += err * err;
            self.mlp
                .backward(&self.params[self.emb_len()..], &trace, &[2.0 * err * weight], grad_mlp, Some(&mut d_in));
            for (s, slot) in rows.slots.iter().enumerate() {
                if let Some(off) = slot {
                    for k in 0..self.embed_dim {
                        grad.push((off + k, d_in[s * self.embed_dim + k]));
                    }
                }
            }
        }
        loss
    }

    /// Mean squared error and its gradient over `examples`.
    fn batch_gradient(&self, examples: &[(Rows, f64)]) -> (f64, Vec<f64>) {
        let n = examples.len() as f64;
        let n_mlp = self.mlp.param_count();
        let parts = par::map_chunks(examples, SAMPLES_PER_CHUNK, |chunk| {
            let mut sparse = Vec::new();
            let mut g_mlp = vec![0.0; n_mlp];
            let loss = self.chunk_gradient(chunk, 1.0 / n, &mut sparse, &mut g_mlp);
            (loss, sparse, g_mlp)
        });
        let emb = self.emb_len();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, sparse, g_mlp) in parts {
            loss += l;
            for (i, g) in sparse {
                grad[i] += g;
            }
            for (dst, g) in grad[emb..].iter_mut().zip(&g_mlp) {
                *dst += g;
            }
        }
        (loss / n, grad)
    }

    /// Training objective (mean squared error on the standardised target) of
    /// `(record, label value)` pairs and its analytic gradient.
    pub fn loss_and_gradient(&self, examples: &[(InteractionRecord, f64)]) -> Result<(f64, Vec<f64>)> {
        if examples.is_empty() {
            return Err(RadError::EmptyInput("no examples".into()));
        }
        let ex: Vec<(Rows, f64)> = examples.iter().map(|(r, l)| (self.rows(r), self.encode(*l))).collect();
        Ok(self.batch_gradient(&ex))
    }

    pub fn objective(&self, examples: &[(InteractionRecord, f64)]) -> Result<f64> {
        Ok(self.loss_and_gradient(examples)?.0)
    }

    fn mse(&self, examples: &[(Rows, f64)]) -> f64 {
        let parts = par::map_chunks(examples, 1024, |chunk| {
            let mut trace = Trace::default();
            let mut buf = Vec::new();
            chunk
                .iter()
                .map(|(rows, t)| (self.output(rows, &mut trace, &mut buf) - t).powi(2))
                .sum::<f64>()
        });
        parts.iter().sum::<f64>() / examples.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            kind: self.kind,
            raw_target: self.raw_target,
            users: self.users.clone(),
            videos: self.videos.clone(),
            feature_cards: self.feature_cards.clone(),
            embed_dim: self.embed_dim,
            layer_sizes: self.mlp.sizes().to_vec(),
            target_mean: self.target_mean,
            target_sd: self.target_sd,
        };
        nn::write_model_file(path, MODEL_MAGIC, MODEL_VERSION, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (ModelHeader, Vec<f64>) = nn::read_model_file(path, MODEL_MAGIC, MODEL_VERSION)?;
        let bad = |reason: &str| RadError::BadArtifact {
            path: path.into(),
            reason: reason.into(),
        };
        let sizes = &h.layer_sizes;
        if sizes.len() < 2 || sizes[0] != (2 + h.feature_cards.len()) * h.embed_dim || *sizes.last().unwrap() != 1 {
            return Err(bad("layer sizes disagree with header"));
        }
        let mut m = Self::build(
            h.kind,
            h.raw_target,
            h.users,
            h.videos,
            h.feature_cards,
            h.embed_dim,
            &sizes[1..sizes.len() - 1],
        );
        if params.len() != m.params.len() {
            return Err(bad("parameter count disagrees with header"));
        }
        m.params = params;
        m.target_mean = h.target_mean;
        m.target_sd = h.target_sd;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRegressor {
    pub model: MlpRegressor,
    /// Losses are mean squared errors on the (possibly log-transformed) target scale.
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Fits a regressor of `kind` on `(train, train_labels)`, early-stopping on validation MSE.
///
/// `*_labels` hold the label value of each record (see [`LabelKind::value`]).
/// With no validation records the training MSE drives early stopping.
pub fn train_regressor(
    train: &[InteractionRecord],
    train_labels: &[f64],
    validation: &[InteractionRecord],
    validation_labels: &[f64],
    kind: LabelKind,
    cfg: &RegressorConfig,
    tcfg: &TrainingConfig,
) -> Result<TrainedRegressor> {
    tcfg.validate()?;
    if train.len() != train_labels.len() || validation.len() != validation_labels.len() {
        return Err(RadError::invalid("records and labels differ in length"));
    }
    if let Some(bad) = train_labels.iter().chain(validation_labels).find(|v| !v.is_finite()) {
        return Err(RadError::invalid(format!("non-finite label {bad}")));
    }
    let mut model = MlpRegressor::new(kind, train, cfg, tcfg.seed)?;
    let raw: Vec<f64> = train_labels.iter().map(|&l| model.encode(l)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / raw.len() as f64;
    model.target_mean = mean;
    model.target_sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let sd2 = model.target_sd * model.target_sd;

    let examples = |recs: &[InteractionRecord], labels: &[f64]| -> Vec<(Rows, f64)> {
        recs.iter().zip(labels).map(|(r, &l)| (model.rows(r), model.encode(l))).collect()
    };
    let train_ex = examples(train, train_labels);
    let val_ex = examples(validation, validation_labels);
    let monitor_set = if val_ex.is_empty() { &train_ex } else { &val_ex };

    let initial = model.mse(monitor_set) * sd2;
    let mut stopper = EarlyStopping::new(tcfg.early_stop_patience, initial, &model.params);
    let mut adam = Adam::new(model.params.len(), tcfg);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut curve = Vec::new();
    for epoch in 1..=tcfg.max_epochs {
        let mut rng = seed::rng(tcfg.seed, "preference.shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(tcfg.batch_size) {
            let batch: Vec<(Rows, f64)> = idx.iter().map(|&i| train_ex[i].clone()).collect();
            let (loss, grad) = model.batch_gradient(&batch);
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_ex.len() as f64 * sd2,
            validation_loss: model.mse(monitor_set) * sd2,
        };
        log::info!(
            "{kind} regressor epoch {epoch}: train {:.6} validation {:.6}",
            stats.train_loss,
            stats.validation_loss
        );
        curve.push(stats);
        if let Verdict::Stop = stopper.observe(&stats, &model.params)? {
            break;
        }
    }
    model.params.copy_from_slice(&stopper.best_params);
    Ok(TrainedRegressor {
        model,
        curve,
        best_epoch: stopper.best_epoch,
    })
}

/// Empirical distribution of every training watch time, used when a
/// record's own cohort cannot be resolved.
pub fn global_cdf(train: &[InteractionRecord]) -> Option<EmpiricalCdf> {
    let key = CohortKey {
        kind: CohortKind::DurationBin,
        id: u64::MAX,
        bin: None,
    };
    EmpiricalCdf::new(key, train.iter().map(|r| r.watch_time).collect())
}

/// Watch-time estimate derived from one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatchTimeEstimate {
    pub watch_time: f64,
    /// Inverse-CDF value from the record's own cohort, when it resolved.
    pub mapped: Option<f64>,
    /// The global training distribution stood in for the record's cohort.
    pub fallback: bool,
}

/// Maps a predicted label value of `kind` to the watch-time domain.
///
/// Quantile kinds go through the inverse CDF of `cohort` in `source`,
/// falling back to `global`; completion rates are scaled by the duration;
/// raw predictions pass through.
pub fn predict_watch_time(
    kind: LabelKind,
    predicted: f64,
    record: &InteractionRecord,
    source: &dyn QuantileSource,
    cohort: Option<CohortKey>,
    global: &EmpiricalCdf,
) -> Result<WatchTimeEstimate> {
    match kind {
        LabelKind::Raw => Ok(WatchTimeEstimate {
            watch_time: predicted,
            mapped: None,
            fallback: false,
        }),
        LabelKind::Pcr => Ok(WatchTimeEstimate {
            watch_time: predicted.max(0.0) * record.duration,
            mapped: None,
            fallback: false,
        }),
        _ => {
            let q = clamp_quantile(predicted);
            match cohort.and_then(|c| source.inverse(&c, q)) {
                Some(w) => Ok(WatchTimeEstimate {
                    watch_time: w,
                    mapped: Some(w),
                    fallback: false,
                }),
                None => Ok(WatchTimeEstimate {
                    watch_time: global.inverse_quantile(q)?,
                    mapped: None,
                    fallback: true,
                }),
            }
        }
    }
}

pub fn clamp_quantile(q: f64) -> f64 {
    if q.is_nan() {
        0.5
    } else {
        q.clamp(QUANTILE_EPS, 1.0 - QUANTILE_EPS)
    }
}

/// Mean of the two watch-time predictions. With one side missing the other
/// is returned and the flag is set.
pub fn combine_uv_watch_time(pred_u: Option<f64>, pred_v: Option<f64>) -> Option<(f64, bool)> {
    match (pred_u, pred_v) {
        (Some(u), Some(v)) => Some(((u + v) / 2.0, false)),
        (Some(x), None) | (None, Some(x)) => Some((x, true)),
        (None, None) => None,
    }
}

/// Probit fusion of predicted user- and video-side quantiles.
pub fn combine_uv_quantile(q_u: f64, q_v: f64, weights: FusionWeights) -> Result<FusedQuantile> {
    fuse(clamp_quantile(q_u), clamp_quantile(q_v), weights)
}

/// One evaluated test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub user_id: u64,
    pub video_id: u64,
    pub timestamp: i64,
    pub method: String,
    /// Prediction on the label scale.
    pub predicted: f64,
    pub mapped_watch_time: Option<f64>,
    /// Watch-time estimate used for error metrics.
    pub watch_time: f64,
    pub fused_quantile: Option<f64>,
    pub fallback: bool,
    pub cold: bool,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RadError::BadArtifact {
        path: path.into(),
        reason: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| RadError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    r.deserialize().map(|row| row.map_err(RadError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecdf::CdfTable;
    use crate::ecdf::TieRule;
    use std::collections::BTreeMap;

    fn rec(u: u64, v: u64, s: f64) -> InteractionRecord {
        InteractionRecord::new(u, v, s, 100.0, 0)
    }

    fn toy() -> RegressorConfig {
        RegressorConfig {
            embed_dim: 3,
            hidden: vec![8, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn label_kind_names_round_trip() {
        for k in LabelKind::ALL {
            assert_eq!(k.name().parse::<LabelKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("nope".parse::<LabelKind>().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let records: Vec<InteractionRecord> = (0..12).map(|i| rec(i % 4, i % 3, 0.0)).collect();
        let cfg = RegressorConfig {
            use_features: true,
            ..toy()
        };
        let records: Vec<InteractionRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.user_features = vec![(i % 2) as u32, (i % 3) as u32];
                r
            })
            .collect();
        let mut model = MlpRegressor::new(LabelKind::RadV, &records, &cfg, 3).unwrap();
        model.target_mean = 0.4;
        model.target_sd = 0.3;
        let examples: Vec<(InteractionRecord, f64)> =
            records.iter().enumerate().map(|(i, r)| (r.clone(), (i as f64 * 0.37).sin().abs())).collect();
        let (_, grad) = model.loss_and_gradient(&examples).unwrap();
        let h = 1e-6;
        let mut num = vec![0.0; grad.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = model.objective(&examples).unwrap();
            model.params_mut()[i] = orig - h;
            let down = model.objective(&examples).unwrap();
            model.params_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    fn fast() -> TrainingConfig {
        TrainingConfig {
            learning_rate: 3e-3,
            max_epochs: 40,
            early_stop_patience: 5,
            batch_size: 16,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn constant_labels_fit_exactly() {
        let records: Vec<InteractionRecord> = (0..60).map(|i| rec(i % 6, i % 5, 0.0)).collect();
        let labels = vec![0.7; 60];
        let t = train_regressor(&records, &labels, &records, &labels, LabelKind::RadV, &toy(), &fast()).unwrap();
        let best = t.curve.iter().map(|c| c.validation_loss).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "{best}");
        let (p, cold) = t.model.predict(&records[0]);
        assert!((p - 0.7).abs() < 0.05 && !cold);
    }

    #[test]
    fn learns_additive_structure() {
        let records: Vec<InteractionRecord> = (0..400).map(|i| rec(i % 20, (i * 7) % 23, 0.0)).collect();
        let labels: Vec<f64> = records.iter().map(|r| 0.02 * r.user_id as f64 + 0.01 * r.video_id as f64).collect();
        let t = train_regressor(&records, &labels, &records, &labels, LabelKind::RadU, &toy(), &fast()).unwrap();
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let baseline = labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / labels.len() as f64;
        let best = t.curve[t.best_epoch - 1].validation_loss;
        assert!(best < 0.2 * baseline, "{best} vs {baseline}");
    }

    #[test]
    fn training_is_deterministic() {
        let records: Vec<InteractionRecord> = (0..80).map(|i| rec(i % 7, i % 9, 0.0)).collect();
        let labels: Vec<f64> = (0..80).map(|i| (i % 11) as f64 * 100.0).collect();
        let cfg = TrainingConfig { max_epochs: 3, ..fast() };
        let a = train_regressor(&records, &labels, &[], &[], LabelKind::Raw, &toy(), &cfg).unwrap();
        let b = train_regressor(&records, &labels, &[], &[], LabelKind::Raw, &toy(), &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn raw_log_target_round_trips() {
        let records = vec![rec(1, 1, 0.0)];
        let mut m = MlpRegressor::new(LabelKind::Raw, &records, &toy(), 0).unwrap();
        m.target_mean = 3.0;
        m.target_sd = 2.0;
        for s in [0.0, 17.3, 12345.0] {
            assert!((m.decode(m.encode(s)) - s).abs() < 1e-9 * s.max(1.0));
        }
        let mut direct = MlpRegressor::new(LabelKind::Raw, &records, &RegressorConfig { raw_target: RawTarget::Direct, ..toy() }, 0).unwrap();
        direct.target_mean = 0.0;
        direct.target_sd = 1.0;
        assert_eq!(direct.decode(17.3), 17.3);
    }

    #[test]
    fn unseen_ids_are_flagged() {
        let m = MlpRegressor::new(LabelKind::RadV, &[rec(1, 1, 0.0)], &toy(), 0).unwrap();
        assert!(!m.predict(&rec(1, 1, 0.0)).1);
        let (p, cold) = m.predict(&rec(2, 1, 0.0));
        assert!(cold && p.is_finite());
    }

    #[test]
    fn save_load_round_trip() {
        let records: Vec<InteractionRecord> = (0..10).map(|i| rec(i, i + 100, 0.0)).collect();
        let m = MlpRegressor::new(LabelKind::D2q, &records, &toy(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        m.save(&p).unwrap();
        let back = MlpRegressor::load(&p).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.predict(&records[3]), m.predict(&records[3]));
        assert_eq!(back.kind(), LabelKind::D2q);
    }

    fn table() -> CdfTable {
        let key = CohortKey::video(5);
        let mut cdfs = BTreeMap::new();
        cdfs.insert(key, EmpiricalCdf::new(key, vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        CdfTable {
            kind: CohortKind::Video,
            tie_rule: TieRule::Midrank,
            cdfs,
        }
    }

    #[test]
    fn watch_time_mapping() {
        let t = table();
        let global = global_cdf(&[rec(0, 0, 100.0), rec(0, 0, 300.0)]).unwrap();
        let r = rec(1, 5, 0.0);
        let key = Some(CohortKey::video(5));
        let est = predict_watch_time(LabelKind::RadV, 0.5, &r, &t, key, &global).unwrap();
        assert!((est.watch_time - 25.0).abs() < 1e-12);
        assert_eq!(est.mapped, Some(est.watch_time));
        let top = predict_watch_time(LabelKind::RadV, 1.2, &r, &t, key, &global).unwrap();
        assert_eq!(top.watch_time, t.get(&CohortKey::video(5)).unwrap().inverse_quantile(1.0 - QUANTILE_EPS).unwrap());
        let raw = predict_watch_time(LabelKind::Raw, 17.3, &r, &t, key, &global).unwrap();
        assert_eq!(raw.watch_time, 17.3);
        let pcr = predict_watch_time(LabelKind::Pcr, 0.25, &r, &t, key, &global).unwrap();
        assert_eq!(pcr.watch_time, 25.0);
        let cold = predict_watch_time(LabelKind::RadV, 0.5, &r, &t, Some(CohortKey::video(6)), &global).unwrap();
        assert!(cold.fallback && cold.mapped.is_none());
        assert!((cold.watch_time - 200.0).abs() < 1e-12);
    }

    #[test]
    fn uv_combiners() {
        assert_eq!(combine_uv_watch_time(Some(10.0), Some(20.0)), Some((15.0, false)));
        assert_eq!(combine_uv_watch_time(Some(7.0), Some(7.0)), Some((7.0, false)));
        assert_eq!(combine_uv_watch_time(None, Some(4.0)), Some((4.0, true)));
        assert_eq!(combine_uv_watch_time(None, None), None);
        let w = FusionWeights::EQUAL;
        assert!((combine_uv_quantile(0.5, 0.5, w).unwrap().q_fused - 0.5).abs() < 1e-12);
        assert!((combine_uv_quantile(0.8413, 0.5, w).unwrap().q_fused - 0.7602).abs() < 1e-3);
        assert!(combine_uv_quantile(0.9, 0.9, w).unwrap().q_fused > 0.9);
        assert!(combine_uv_quantile(1.3, -0.2, w).unwrap().q_fused.is_finite());
    }

    #[test]
    fn predictions_csv_round_trip() {
        let rows = vec![
            PredictionRow {
                user_id: 1,
                video_id: 2,
                timestamp: 3,
                method: "rad_v".into(),
                predicted: 0.25,
                mapped_watch_time: Some(12.5),
                watch_time: 12.5,
                fused_quantile: None,
                fallback: false,
                cold: false,
            },
            PredictionRow {
                user_id: 4,
                video_id: 5,
                timestamp: 6,
                method: "rad_uv".into(),
                predicted: 0.75,
                mapped_watch_time: None,
                watch_time: 99.0,
                fused_quantile: Some(0.8),
                fallback: true,
                cold: true,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_predictions(&p, &rows).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), rows);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mapping_is_monotone_in_quantile(a in -0.5f64..1.5, b in -0.5f64..1.5) {
                let t = table();
                let global = global_cdf(&[rec(0, 0, 1.0)]).unwrap();
                let r = rec(1, 5, 0.0);
                let key = Some(CohortKey::video(5));
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let wl = predict_watch_time(LabelKind::RadV, lo, &r, &t, key, &global).unwrap().watch_time;
                let wh = predict_watch_time(LabelKind::RadV, hi, &r, &t, key, &global).unwrap().watch_time;
                prop_assert!(wl <= wh);
            }
        }
    }
}
