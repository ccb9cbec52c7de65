//! Synthetic watch logs with known latent preference.
//!
//! `S = max(0, C + P + eps)`, optionally clipped at the video duration, where
//! `C = base + a * ln(d / d_ref) + b * popularity_z(i) + c * activeness_z(u)`
//! depends only on ids, `P = scale * <x_u, y_i> / sqrt(r)` is a low-rank
//! preference with standard-normal factors, and `eps` is Gaussian noise.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::{par, seed, RadError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub videos: usize,
    /// Mean exposure probability of a (user, video) pair.
    pub exposure_density: f64,
    /// Exposure tilts `(popularity / mean)^gamma` and `(activeness / mean)^gamma`.
    pub popularity_exposure: f64,
    pub activeness_exposure: f64,
    pub duration_median_ms: f64,
    pub duration_log_sd: f64,
    pub min_duration_ms: f64,
    /// Intercept of `C`.
    pub base_watch_ms: f64,
    /// Coefficient on `ln(duration / duration_median_ms)`.
    pub duration_coef: f64,
    /// Coefficients on the standardised popularity and activeness.
    pub popularity_coef: f64,
    pub activeness_coef: f64,
    /// Log-scale spreads of the log-normal popularity and activeness draws.
    pub popularity_log_sd: f64,
    pub activeness_log_sd: f64,
    pub preference_rank: usize,
    /// Standard deviation of `P`.
    pub preference_scale_ms: f64,
    pub noise_sd_ms: f64,
    /// Clip `S` at the video duration.
    pub truncate: bool,
    /// Round watch times and durations to whole milliseconds.
    pub round_ms: bool,
    pub feature_slots: usize,
    pub feature_cardinality: u32,
    /// Latent user segments behind the categorical features.
    pub user_segments: usize,
    /// Probability a feature follows the user's segment instead of noise.
    pub feature_purity: f64,
    /// Spread of segment-level shifts in log activeness.
    pub segment_activeness_sd: f64,
    pub start_timestamp_ms: i64,
    pub span_ms: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 2000,
            videos: 1000,
            exposure_density: 0.5,
            popularity_exposure: 0.3,
            activeness_exposure: 0.3,
            duration_median_ms: 20_000.0,
            duration_log_sd: 0.6,
            min_duration_ms: 1000.0,
            base_watch_ms: 10_000.0,
            duration_coef: 6000.0,
            popularity_coef: 3000.0,
            activeness_coef: 3000.0,
            popularity_log_sd: 0.5,
            activeness_log_sd: 0.5,
            preference_rank: 8,
            preference_scale_ms: 3000.0,
            noise_sd_ms: 2500.0,
            truncate: true,
            round_ms: true,
            feature_slots: 4,
            feature_cardinality: 6,
            user_segments: 10,
            feature_purity: 0.8,
            segment_activeness_sd: 0.5,
            start_timestamp_ms: 1_650_000_000_000,
            span_ms: 30 * 24 * 3600 * 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.popularity_exposure,
            self.activeness_exposure,
            self.duration_log_sd,
            self.popularity_log_sd,
            self.activeness_log_sd,
            self.preference_scale_ms,
            self.noise_sd_ms,
            self.segment_activeness_sd,
        ];
        let ok = self.users > 0
            && self.videos > 0
            && self.exposure_density > 0.0
            && self.exposure_density <= 1.0
            && self.duration_median_ms > 0.0
            && self.min_duration_ms > 0.0
            && self.preference_rank > 0
            && self.feature_cardinality > 0
            && self.user_segments > 0
            && (0.0..=1.0).contains(&self.feature_purity)
            && self.span_ms > 0
            && nonneg.iter().all(|v| v.is_finite() && *v >= 0.0)
            && [self.base_watch_ms, self.duration_coef, self.popularity_coef, self.activeness_coef]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(RadError::Config(format!("invalid synthetic spec {self:?}")))
        }
    }

    /// Timestamp below which the first `fraction` of the time span falls.
    pub fn cutoff(&self, fraction: f64) -> i64 {
        self.start_timestamp_ms + (self.span_ms as f64 * fraction).floor() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: u64,
    pub duration: f64,
    pub popularity_raw: f64,
    pub popularity_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: u64,
    pub activeness_raw: f64,
    pub activeness_z: f64,
    pub segment: u32,
}

/// Latent components of one emitted record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub user_id: u64,
    pub video_id: u64,
    #[serde(rename = "P")]
    pub preference: f64,
    #[serde(rename = "C")]
    pub confounder: f64,
    #[serde(rename = "epsilon")]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub users: Vec<UserTruth>,
    pub videos: Vec<VideoTruth>,
    /// Aligned with the generated records.
    pub pairs: Vec<PairTruth>,
}

impl GroundTruth {
    /// Latent preference keyed by (user, video).
    pub fn preference_map(&self) -> HashMap<(u64, u64), f64> {
        self.pairs.iter().map(|p| ((p.user_id, p.video_id), p.preference)).collect()
    }
}

fn standardize(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    raw.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }).collect()
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generates records (sorted by user, then video) and their ground truth.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<InteractionRecord>, GroundTruth)> {
    spec.validate()?;
    let r = spec.preference_rank;
    let round = |v: f64| if spec.round_ms { v.round() } else { v };

    // Segment-level structure shared by the user draws.
    let mut seg_rng = seed::rng(spec.seed, "synth.segments", 0);
    let segment_codes: Vec<Vec<u32>> = (0..spec.user_segments)
        .map(|_| (0..spec.feature_slots).map(|_| seg_rng.random_range(0..spec.feature_cardinality)).collect())
        .collect();
    let segment_shift: Vec<f64> = (0..spec.user_segments)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut seg_rng);
            spec.segment_activeness_sd * z
        })
        .collect();

    struct VideoDraw {
        duration: f64,
        popularity: f64,
        factors: Vec<f64>,
    }
    let video_draws = par::map_range(spec.videos, |i| {
        let mut rng = seed::rng(spec.seed, "synth.video", i as u64);
        let z: f64 = StandardNormal.sample(&mut rng);
        let duration = round((spec.duration_median_ms * (spec.duration_log_sd * z).exp()).max(spec.min_duration_ms));
        let zp: f64 = StandardNormal.sample(&mut rng);
        VideoDraw {
            duration,
            popularity: (spec.popularity_log_sd * zp).exp(),
            factors: normal_vec(&mut rng, r),
        }
    });
    struct UserDraw {
        activeness: f64,
        segment: u32,
        features: Vec<u32>,
        factors: Vec<f64>,
    }
    let user_draws = par::map_range(spec.users, |u| {
        let mut rng = seed::rng(spec.seed, "synth.user", u as u64);
        let segment = rng.random_range(0..spec.user_segments);
        let za: f64 = StandardNormal.sample(&mut rng);
        let features = (0..spec.feature_slots)
            .map(|j| {
                if rng.random::<f64>() < spec.feature_purity {
                    segment_codes[segment][j]
                } else {
                    rng.random_range(0..spec.feature_cardinality)
                }
            })
            .collect();
        UserDraw {
            activeness: (spec.activeness_log_sd * za + segment_shift[segment]).exp(),
            segment: segment as u32,
            features,
            factors: normal_vec(&mut rng, r),
        }
    });

    let pop_raw: Vec<f64> = video_draws.iter().map(|v| v.popularity).collect();
    let act_raw: Vec<f64> = user_draws.iter().map(|u| u.activeness).collect();
    let pop_z = standardize(&pop_raw);
    let act_z = standardize(&act_raw);
    let pop_mean = pop_raw.iter().sum::<f64>() / pop_raw.len() as f64;
    let act_mean = act_raw.iter().sum::<f64>() / act_raw.len() as f64;
    let video_c: Vec<f64> = video_draws
        .iter()
        .zip(&pop_z)
        .map(|(v, z)| spec.duration_coef * (v.duration / spec.duration_median_ms).ln() + spec.popularity_coef * z)
        .collect();
    let video_w: Vec<f64> = pop_raw.iter().map(|p| (p / pop_mean).powf(spec.popularity_exposure)).collect();
    let p_scale = spec.preference_scale_ms / (r as f64).sqrt();
    let noise = Normal::new(0.0, spec.noise_sd_ms).map_err(|e| RadError::Config(e.to_string()))?;

    let blocks = par::map_range(spec.users, |u| {
        let mut rng = seed::rng(spec.seed, "synth.pairs", u as u64);
        let user = &user_draws[u];
        let user_w = (user.activeness / act_mean).powf(spec.activeness_exposure);
        let user_c = spec.base_watch_ms + spec.activeness_coef * act_z[u];
        let mut recs = Vec::new();
        let mut truth = Vec::new();
        for (i, video) in video_draws.iter().enumerate() {
            let p_expose = (spec.exposure_density * user_w * video_w[i]).min(1.0);
            if rng.random::<f64>() >= p_expose {
                continue;
            }
            let eps = noise.sample(&mut rng);
            let timestamp = spec.start_timestamp_ms + rng.random_range(0..spec.span_ms);
            let pref = p_scale * user.factors.iter().zip(&video.factors).map(|(a, b)| a * b).sum::<f64>();
            let c = user_c + video_c[i];
            let mut s = (c + pref + eps).max(0.0);
            if spec.truncate {
                s = s.min(video.duration);
            }
            recs.push(InteractionRecord {
                user_id: u as u64,
                video_id: i as u64,
                watch_time: round(s),
                duration: video.duration,
                timestamp,
                user_features: user.features.clone(),
            });
            truth.push(PairTruth {
                user_id: u as u64,
                video_id: i as u64,
                preference: pref,
                confounder: c,
                noise: eps,
            });
        }
        (recs, truth)
    });

    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (r, t) in blocks {
        records.extend(r);
        pairs.extend(t);
    }
    let truth = GroundTruth {
        users: user_draws
            .iter()
            .enumerate()
            .map(|(u, d)| UserTruth {
                user_id: u as u64,
                activeness_raw: d.activeness,
                activeness_z: act_z[u],
                segment: d.segment,
            })
            .collect(),
        videos: video_draws
            .iter()
            .enumerate()
            .map(|(i, d)| VideoTruth {
                video_id: i as u64,
                duration: d.duration,
                popularity_raw: d.popularity,
                popularity_z: pop_z[i],
            })
            .collect(),
        pairs,
    };
    Ok((records, truth))
}

pub const TRUTH_FILE: &str = "ground_truth.csv";
pub const TRUTH_USERS_FILE: &str = "ground_truth_users.csv";
pub const TRUTH_VIDEOS_FILE: &str = "ground_truth_videos.csv";

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RadError::BadArtifact {
        path: path.into(),
        reason: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| RadError::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    r.deserialize().map(|row| row.map_err(RadError::from)).collect()
}

/// Writes the pair sidecar plus per-entity confounder tables into `dir`.
pub fn write_ground_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    write_rows(&dir.join(TRUTH_FILE), &truth.pairs)?;
    write_rows(&dir.join(TRUTH_USERS_FILE), &truth.users)?;
    write_rows(&dir.join(TRUTH_VIDEOS_FILE), &truth.videos)
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    Ok(GroundTruth {
        pairs: read_rows(&dir.join(TRUTH_FILE))?,
        users: read_rows(&dir.join(TRUTH_USERS_FILE))?,
        videos: read_rows(&dir.join(TRUTH_VIDEOS_FILE))?,
    })
}

/// Count-weighted variance of group means: `sum_g n_g (mean_g - mean)^2 / N`.
pub fn between_group_variance(values: &[f64], groups: &[u64]) -> f64 {
    let mut acc: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for (v, g) in values.iter().zip(groups) {
        let e = acc.entry(*g).or_insert((0.0, 0.0));
        e.0 += v;
        e.1 += 1.0;
    }
    between_from_sums(acc.values().copied())
}

fn between_from_sums(groups: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let (total, n) = groups.clone().fold((0.0, 0.0), |a, g| (a.0 + g.0, a.1 + g.1));
    if n == 0.0 {
        return 0.0;
    }
    let mean = total / n;
    groups
        .filter(|g| g.1 > 0.0)
        .map(|(s, c)| c * (s / c - mean).powi(2))
        .sum::<f64>()
        / n
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceCheckConfig {
    pub duration_bins: usize,
    pub popularity_groups: usize,
    pub bootstrap: usize,
    /// Slack in bootstrap standard errors.
    pub slack_se: f64,
    pub min_mean_per_video: f64,
    pub seed: u64,
}

impl Default for VarianceCheckConfig {
    fn default() -> Self {
        Self {
            duration_bins: 4,
            popularity_groups: 10,
            bootstrap: 200,
            slack_se: 3.0,
            min_mean_per_video: 20.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingVariance {
    pub name: String,
    pub groups: usize,
    pub between_variance: f64,
    /// `Var(E[S|i]) - Var(E[S|c])`.
    pub difference: f64,
    pub standard_error: f64,
    pub slack: f64,
    /// `difference >= -slack`.
    pub holds: bool,
    /// `difference > slack`.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub records: usize,
    pub videos: usize,
    pub id_variance: f64,
    pub groupings: Vec<GroupingVariance>,
    /// Grouping by the id itself reproduced `id_variance` bit for bit.
    pub id_equality: bool,
}

impl VarianceReport {
    pub fn all_hold(&self) -> bool {
        self.id_equality && self.groupings.iter().all(|g| g.holds)
    }
}

/// Equal-count groups of `values` by rank; ties broken by position.
fn rank_groups(values: &[f64], groups: usize) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0u64; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (rank * groups / values.len()) as u64;
    }
    out
}

/// Compares the between-video variance of `S` with the between-group variance
/// under coarser video-side confounders (duration bins, popularity groups, a
/// constant), using a video-level bootstrap for slack.
pub fn check_variance_monotonicity(
    records: &[InteractionRecord],
    truth: &GroundTruth,
    cfg: &VarianceCheckConfig,
) -> Result<VarianceReport> {
    if truth.videos.is_empty() || records.is_empty() {
        return Err(RadError::EmptyInput("no videos or records".into()));
    }
    let index: HashMap<u64, usize> = truth.videos.iter().enumerate().map(|(i, v)| (v.video_id, i)).collect();
    let nv = truth.videos.len();
    let mut sums = vec![(0.0, 0.0); nv];
    for r in records {
        let i = *index
            .get(&r.video_id)
            .ok_or_else(|| RadError::invalid(format!("video {} missing from ground truth", r.video_id)))?;
        sums[i].0 += r.watch_time;
        sums[i].1 += 1.0;
    }
    let mean_per_video = records.len() as f64 / nv as f64;
    if mean_per_video < cfg.min_mean_per_video {
        return Err(RadError::invalid(format!(
            "insufficient samples: {mean_per_video:.1} per video, need {}",
            cfg.min_mean_per_video
        )));
    }
    let durations: Vec<f64> = truth.videos.iter().map(|v| v.duration).collect();
    let popularity: Vec<f64> = truth.videos.iter().map(|v| v.popularity_z).collect();
    let groupings: Vec<(&str, Vec<u64>)> = vec![
        ("video_id", truth.videos.iter().map(|v| v.video_id).collect()),
        ("duration_bin", rank_groups(&durations, cfg.duration_bins.max(1))),
        ("popularity_group", rank_groups(&popularity, cfg.popularity_groups.max(1))),
        ("constant", vec![0; nv]),
    ];

    let grouped_variance = |draw: &[usize], labels: &[u64]| -> f64 {
        let mut acc: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for &i in draw {
            let e = acc.entry(labels[i]).or_insert((0.0, 0.0));
            e.0 += sums[i].0;
            e.1 += sums[i].1;
        }
        between_from_sums(acc.values().copied())
    };
    let id_variance_of = |draw: &[usize]| between_from_sums(draw.iter().map(|&i| sums[i]).collect::<Vec<_>>().into_iter());

    let all: Vec<usize> = (0..nv).collect();
    let id_variance = id_variance_of(&all);
    let point: Vec<f64> = groupings.iter().map(|(_, g)| grouped_variance(&all, g)).collect();

    let boot = par::map_range(cfg.bootstrap, |b| {
        let mut rng = seed::rng(cfg.seed, "synth.bootstrap", b as u64);
        let draw: Vec<usize> = (0..nv).map(|_| rng.random_range(0..nv)).collect();
        let v_id = id_variance_of(&draw);
        groupings.iter().map(|(_, g)| v_id - grouped_variance(&draw, g)).collect::<Vec<f64>>()
    });

    let report_groupings = groupings
        .iter()
        .enumerate()
        .map(|(k, (name, labels))| {
            let diffs: Vec<f64> = boot.iter().map(|d| d[k]).collect();
            let se = if diffs.len() > 1 {
                let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
                (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            let difference = id_variance - point[k];
            let slack = cfg.slack_se * se;
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            GroupingVariance {
                name: name.to_string(),
                groups: distinct.len(),
                between_variance: point[k],
                difference,
                standard_error: se,
                slack,
                holds: difference >= -slack,
                strict: difference > slack,
            }
        })
        .collect();
    Ok(VarianceReport {
        records: records.len(),
        videos: nv,
        id_variance,
        id_equality: point[0] == id_variance,
        groupings: report_groupings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniformityConfig {
    pub min_cohort: usize,
    /// Allowed relative deviation of the pooled variance from 1/12.
    pub variance_tolerance: f64,
    pub correlation_tolerance: f64,
    /// Correlations are enforced only with at least this many labels.
    pub min_pairs: usize,
}

impl Default for UniformityConfig {
    fn default() -> Self {
        Self {
            min_cohort: 100,
            variance_tolerance: 0.2,
            correlation_tolerance: 0.02,
            min_pairs: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortUniformity {
    pub cohort: u64,
    pub n: usize,
    pub mean: f64,
    /// Half-width `3 * sqrt(1 / (12 n))`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderCorrelation {
    pub name: String,
    pub rho: f64,
    pub pairs: usize,
    pub enforced: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub cohorts: Vec<CohortUniformity>,
    pub skipped_cohorts: usize,
    pub pooled_variance: f64,
    pub variance_pass: bool,
    pub correlations: Vec<ConfounderCorrelation>,
}

impl UniformityReport {
    pub fn cohorts_passing(&self) -> usize {
        self.cohorts.iter().filter(|c| c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.cohorts.iter().all(|c| c.pass) && self.variance_pass && self.correlations.iter().all(|c| c.pass)
    }
}

/// Checks that quantile labels look uniform within each cohort and carry no
/// linear trace of cohort-level confounders.
///
/// `confounders` pairs a name with one value per label. Only labels from
/// cohorts with at least `min_cohort` members enter the pooled statistics.
pub fn check_quantile_uniformity(
    labels: &[f64],
    cohorts: &[u64],
    confounders: &[(&str, &[f64])],
    cfg: &UniformityConfig,
) -> Result<UniformityReport> {
    if labels.len() != cohorts.len() || confounders.iter().any(|(_, v)| v.len() != labels.len()) {
        return Err(RadError::invalid("labels, cohorts and confounders differ in length"));
    }
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (q, c) in labels.iter().zip(cohorts) {
        let e = acc.entry(*c).or_insert((0.0, 0));
        e.0 += q;
        e.1 += 1;
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (&cohort, &(sum, n)) in &acc {
        if n < cfg.min_cohort {
            skipped += 1;
            continue;
        }
        let mean = sum / n as f64;
        let bound = 3.0 * (1.0 / (12.0 * n as f64)).sqrt();
        rows.push(CohortUniformity {
            cohort,
            n,
            mean,
            bound,
            pass: (mean - 0.5).abs() <= bound,
        });
    }
    if rows.is_empty() {
        return Err(RadError::invalid(format!("insufficient cohort sizes: none has {} labels", cfg.min_cohort)));
    }
    let keep: Vec<bool> = cohorts.iter().map(|c| acc[c].1 >= cfg.min_cohort).collect();
    let kept: Vec<f64> = labels.iter().zip(&keep).filter(|(_, k)| **k).map(|(q, _)| *q).collect();
    let m = kept.iter().sum::<f64>() / kept.len() as f64;
    let pooled_variance = kept.iter().map(|q| (q - m).powi(2)).sum::<f64>() / kept.len() as f64;
    let correlations = confounders
        .iter()
        .map(|(name, values)| {
            let x: Vec<f64> = values.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
            let rho = pearson(&kept, &x);
            let enforced = kept.len() >= cfg.min_pairs;
            ConfounderCorrelation {
                name: name.to_string(),
                rho,
                pairs: kept.len(),
                enforced,
                pass: !enforced || rho.abs() < cfg.correlation_tolerance,
            }
        })
        .collect();
    Ok(UniformityReport {
        cohorts: rows,
        skipped_cohorts: skipped,
        pooled_variance,
        variance_pass: (pooled_variance * 12.0 - 1.0).abs() <= cfg.variance_tolerance,
        correlations,
    })
}
