//! Stage orchestration behind the `rad` command.
//!
//! Stages talk to each other only through files under the output directory.
//! Every stage hashes what it read and wrote into `manifests/<stage>.json`
//! together with the config section that drove it; a missing upstream file is
//! reported as [`RadError::MissingArtifact`] naming the stage that makes it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cluster::{self, KModesConfig};
use crate::data::{self, read_json, write_json, DurationBinner, InteractionRecord, Schema, SplitReport, SplitSpec};
use crate::distembed::{self, FitSummary, MultiquantileConfig, MultiquantileModel};
use crate::ecdf::{self, CdfTable, ClusterMap, CohortKey, CohortKind, LabelSources, QuantileSource, RecordLabels, TieRule};
use crate::fusion::{FusionPolicy, FusionWeights};
use crate::metrics::{self, MetricsReport};
use crate::nn::{EpochStats, TrainingConfig};
use crate::preference::{self, LabelKind, MlpRegressor, PredictionRow, RegressorConfig};
use crate::synth::{self, SyntheticSpec};
use crate::{seed, RadError, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Name of the fused method in evaluation output.
pub const RAD_UV: &str = "rad_uv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    Split,
    Cluster,
    BuildCdfs,
    TrainEmbed,
    Label,
    TrainModel,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Simulate,
        Stage::Split,
        Stage::Cluster,
        Stage::BuildCdfs,
        Stage::TrainEmbed,
        Stage::Label,
        Stage::TrainModel,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Split => "split",
            Stage::Cluster => "cluster",
            Stage::BuildCdfs => "build-cdfs",
            Stage::TrainEmbed => "train-embed",
            Stage::Label => "label",
            Stage::TrainModel => "train-model",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = RadError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| RadError::Config(format!("unknown stage `{s}`")))
    }
}

/// Where cohort distributions come from when labelling and mapping back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CdfSource {
    #[default]
    Empirical,
    Learned,
}

impl FromStr for CdfSource {
    type Err = RadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(CdfSource::Empirical),
            "learned" => Ok(CdfSource::Learned),
            _ => Err(RadError::Config(format!("unknown cdf source `{s}` (empirical | learned)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Explicit cut-offs in the timestamp unit. When absent they sit at the
    /// fractions below of the observed time span.
    pub train_end: Option<i64>,
    pub validation_end: Option<i64>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub filter_unseen: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_end: None,
            validation_end: None,
            train_fraction: 0.8,
            validation_fraction: 0.9,
            filter_unseen: true,
        }
    }
}

impl SplitConfig {
    fn spec_for(&self, records: &[InteractionRecord]) -> Result<SplitSpec> {
        let lo = records.iter().map(|r| r.timestamp).min();
        let hi = records.iter().map(|r| r.timestamp).max();
        let (Some(lo), Some(hi)) = (lo, hi) else {
            return Err(RadError::EmptyInput("no interactions to split".into()));
        };
        let at = |f: f64| lo + ((hi - lo) as f64 * f).floor() as i64;
        let mut spec = SplitSpec::new(
            self.train_end.unwrap_or_else(|| at(self.train_fraction)),
            self.validation_end.unwrap_or_else(|| at(self.validation_fraction)),
        );
        spec.filter_unseen = self.filter_unseen;
        if spec.validation_end < spec.train_end {
            return Err(RadError::Config(format!(
                "validation cut-off {} precedes training cut-off {}",
                spec.validation_end, spec.train_end
            )));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub model: MultiquantileConfig,
    pub training: TrainingConfig,
    /// Cohort kind of the user-side model.
    pub user_kind: CohortKind,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            model: MultiquantileConfig::default(),
            training: TrainingConfig {
                learning_rate: 3e-3,
                max_epochs: 100,
                early_stop_patience: 20,
                ..TrainingConfig::default()
            },
            user_kind: CohortKind::UserClusterXDurationbin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Score learned quantile models against held-out cohort samples.
    pub distribution_fit: bool,
    /// Training samples a cohort needs to enter the distribution-fit table.
    pub min_fit_support: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            distribution_fit: true,
            min_fit_support: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Largest cohorts per kind written to the density table.
    pub density_cohorts: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { density_cohorts: 3 }
    }
}

/// Everything a run depends on. Serialised as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Root seed. Every nested `seed` field is replaced by a named sub-seed of it.
    pub seed: u64,
    /// Interaction log to ingest. When absent, `simulate` output is used.
    pub input: Option<PathBuf>,
    pub schema: Schema,
    pub synth: SyntheticSpec,
    pub split: SplitConfig,
    pub duration_bins: usize,
    pub tie_rule: TieRule,
    /// Cohort kind of the empirical user-side distributions.
    pub user_cohort: CohortKind,
    pub clip_pcr: bool,
    pub cluster: KModesConfig,
    pub cdf_source: CdfSource,
    pub embed: EmbedConfig,
    /// Stage-2 models to train and evaluate.
    pub labels: Vec<LabelKind>,
    pub fusion: FusionPolicy,
    pub regressor: RegressorConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("rad-out"),
            seed: 0,
            input: None,
            schema: Schema::default(),
            synth: SyntheticSpec::default(),
            split: SplitConfig::default(),
            duration_bins: 4,
            tie_rule: TieRule::Midrank,
            user_cohort: CohortKind::UserXDurationbin,
            clip_pcr: true,
            cluster: KModesConfig::default(),
            cdf_source: CdfSource::Empirical,
            embed: EmbedConfig::default(),
            labels: LabelKind::ALL.to_vec(),
            fusion: FusionPolicy::Equal,
            regressor: RegressorConfig::default(),
            training: TrainingConfig {
                learning_rate: 1e-3,
                ..TrainingConfig::default()
            },
            evaluation: EvaluationConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn config_err(e: RadError) -> RadError {
    match e {
        RadError::Config(_) => e,
        other => RadError::Config(other.to_string()),
    }
}

fn is_user_kind(kind: CohortKind) -> bool {
    matches!(kind, CohortKind::UserXDurationbin | CohortKind::UserClusterXDurationbin)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RadError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RadError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(RadError::Config(m));
        if self.duration_bins == 0 {
            return fail("duration_bins must be at least 1".into());
        }
        if self.labels.is_empty() {
            return fail("labels must name at least one label kind".into());
        }
        if !is_user_kind(self.user_cohort) {
            return fail(format!("user_cohort must be a user cohort kind, got {}", self.user_cohort.name()));
        }
        if !is_user_kind(self.embed.user_kind) {
            return fail(format!("embed.user_kind must be a user cohort kind, got {}", self.embed.user_kind.name()));
        }
        let s = &self.split;
        if !(s.train_fraction > 0.0 && s.train_fraction <= s.validation_fraction && s.validation_fraction <= 1.0) {
            return fail(format!(
                "split fractions must satisfy 0 < train ({}) <= validation ({}) <= 1",
                s.train_fraction, s.validation_fraction
            ));
        }
        if self.evaluation.min_fit_support == 0 {
            return fail("evaluation.min_fit_support must be positive".into());
        }
        if self.cluster.k == 0 {
            return fail("cluster.k must be positive".into());
        }
        if self.embed.model.breakpoints == 0 {
            return fail("embed.model.breakpoints must be positive".into());
        }
        if let FusionPolicy::Fixed { alpha, beta } = self.fusion {
            FusionWeights::new(alpha, beta).map_err(config_err)?;
        }
        if self.input.is_none() {
            self.synth.validate().map_err(config_err)?;
        }
        self.training.validate().map_err(config_err)?;
        self.embed.training.validate().map_err(config_err)
    }

    /// Validated copy with every module seed derived from the root seed.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut c = self.clone();
        c.synth.seed = seed::derive(self.seed, "synth", 0);
        c.cluster.seed = seed::derive(self.seed, "cluster", 0);
        c.embed.training.seed = seed::derive(self.seed, "train-embed", 0);
        c.training.seed = seed::derive(self.seed, "train-model", 0);
        let mut seen = Vec::new();
        c.labels.retain(|k| {
            let fresh = !seen.contains(k);
            seen.push(*k);
            fresh
        });
        Ok(c)
    }

    fn needs_embed(&self) -> bool {
        self.cdf_source == CdfSource::Learned || self.evaluation.distribution_fit
    }

    /// User-side cohort kind used for labels and inverse mapping.
    fn active_user_kind(&self) -> CohortKind {
        match self.cdf_source {
            CdfSource::Empirical => self.user_cohort,
            CdfSource::Learned => self.embed.user_kind,
        }
    }

    fn needs_clusters(&self) -> bool {
        self.active_user_kind() == CohortKind::UserClusterXDurationbin
            || (self.needs_embed() && self.embed.user_kind == CohortKind::UserClusterXDurationbin)
    }

    /// Stages run by [`run_all`], in order.
    pub fn stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Simulate => self.input.is_none(),
                Stage::Cluster => self.needs_clusters(),
                Stage::TrainEmbed => self.needs_embed(),
                _ => true,
            })
            .collect()
    }

    fn section(&self, stage: Stage) -> Value {
        match stage {
            Stage::Simulate => json!({ "seed": self.seed, "synth": self.synth }),
            Stage::Split => json!({
                "input": self.input,
                "schema": self.schema,
                "split": self.split,
                "duration_bins": self.duration_bins,
            }),
            Stage::Cluster => json!({ "cluster": self.cluster }),
            Stage::BuildCdfs => json!({ "tie_rule": self.tie_rule, "user_cohort": self.user_cohort }),
            Stage::TrainEmbed => json!({ "embed": self.embed }),
            Stage::Label => json!({
                "cdf_source": self.cdf_source,
                "user_kind": self.active_user_kind(),
                "clip_pcr": self.clip_pcr,
            }),
            Stage::TrainModel => json!({
                "labels": self.labels,
                "regressor": self.regressor,
                "training": self.training,
            }),
            Stage::Evaluate => json!({
                "labels": self.labels,
                "fusion": self.fusion,
                "cdf_source": self.cdf_source,
                "user_kind": self.active_user_kind(),
                "evaluation": self.evaluation,
            }),
            Stage::Report => json!({ "evaluation": self.evaluation, "report": self.report }),
        }
    }
}

/// Path and SHA-256 of one artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    /// Relative to the output directory for pipeline artifacts; as given for external inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub config: Value,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub manifest: PathBuf,
    pub outputs: Vec<PathBuf>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| RadError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn manifest_path(output_dir: &Path, stage: Stage) -> PathBuf {
    output_dir.join("manifests").join(format!("{}.json", stage.name()))
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    stage: Stage,
    inputs: Vec<ArtifactHash>,
    outputs: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a PipelineConfig, stage: Stage) -> Self {
        Self {
            cfg,
            stage,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn input(&mut self, rel: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(RadError::MissingArtifact {
                path: p,
                producer: producer.name().into(),
            });
        }
        self.inputs.push(ArtifactHash {
            path: rel.into(),
            sha256: hash_file(&p)?,
        });
        Ok(p)
    }

    fn external(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(RadError::Config(format!("input file {} does not exist", path.display())));
        }
        self.inputs.push(ArtifactHash {
            path: path.display().to_string(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| RadError::io(dir, e))?;
        }
        self.outputs.push(rel.into());
        Ok(p)
    }

    fn finish(self) -> Result<StageOutcome> {
        let outputs = self
            .outputs
            .iter()
            .map(|rel| {
                Ok(ArtifactHash {
                    path: rel.clone(),
                    sha256: hash_file(&self.path(rel))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            stage: self.stage.name().into(),
            config: self.cfg.section(self.stage),
            inputs: self.inputs,
            outputs,
        };
        let path = manifest_path(&self.cfg.output_dir, self.stage);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| RadError::io(&path, e))?;
        write_json(&path, &manifest)?;
        Ok(StageOutcome {
            stage: self.stage,
            manifest: path,
            outputs: self.outputs.iter().map(|rel| self.cfg.output_dir.join(rel)).collect(),
        })
    }

    fn records(&mut self, rel: &str, producer: Stage) -> Result<Vec<InteractionRecord>> {
        let p = self.input(rel, producer)?;
        let ingested = data::ingest(&p, &Schema::default())?;
        if ingested.malformed > 0 {
            return Err(RadError::BadArtifact {
                path: p,
                reason: format!("{} malformed rows", ingested.malformed),
            });
        }
        Ok(ingested.records)
    }

    fn binner(&mut self) -> Result<DurationBinner> {
        read_json(&self.input("split/binner.json", Stage::Split)?)
    }

    fn clusters(&mut self, needed: bool) -> Result<Option<ClusterMap>> {
        if !needed {
            return Ok(None);
        }
        Ok(Some(cluster::read_cluster_map(&self.input("cluster/clusters.csv", Stage::Cluster)?)?))
    }

    fn embed_model(&mut self, name: &str) -> Result<MultiquantileModel> {
        MultiquantileModel::load(&self.input(&format!("embed/{name}.bin"), Stage::TrainEmbed)?)
    }
}

/// The three cohort distributions used for labels and inverse mapping.
struct Sources {
    video: Box<dyn QuantileSource>,
    user: Box<dyn QuantileSource>,
    d2q: Box<dyn QuantileSource>,
    user_kind: CohortKind,
}

impl Sources {
    fn load(ctx: &mut Ctx<'_>) -> Result<Self> {
        let cfg = ctx.cfg;
        match cfg.cdf_source {
            CdfSource::Empirical => {
                let video = CdfTable::load(&ctx.input("cdfs/video.json", Stage::BuildCdfs)?)?;
                let user = CdfTable::load(&ctx.input("cdfs/user.json", Stage::BuildCdfs)?)?;
                let d2q = CdfTable::load(&ctx.input("cdfs/d2q.json", Stage::BuildCdfs)?)?;
                let user_kind = user.kind;
                Ok(Self {
                    video: Box::new(video),
                    user: Box::new(user),
                    d2q: Box::new(d2q),
                    user_kind,
                })
            }
            CdfSource::Learned => Ok(Self {
                video: Box::new(ctx.embed_model("video")?.snapshot()),
                user: Box::new(ctx.embed_model("user")?.snapshot()),
                d2q: Box::new(ctx.embed_model("d2q")?.snapshot()),
                user_kind: cfg.embed.user_kind,
            }),
        }
    }

    /// Source and cohort used to map a prediction of `kind` back to watch time.
    fn for_kind(
        &self,
        kind: LabelKind,
        r: &InteractionRecord,
        binner: &DurationBinner,
        clusters: Option<&ClusterMap>,
    ) -> (&dyn QuantileSource, Option<CohortKey>) {
        let (src, ck) = match kind {
            LabelKind::RadV => (&self.video, CohortKind::Video),
            LabelKind::RadU => (&self.user, self.user_kind),
            _ => (&self.d2q, CohortKind::DurationBin),
        };
        let key = match kind {
            LabelKind::Raw | LabelKind::Pcr => None,
            _ => CohortKey::for_record(ck, r, Some(binner), clusters),
        };
        (src.as_ref(), key)
    }
}

/// Runs one stage with `cfg` and writes its manifest.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageOutcome> {
    let cfg = cfg.resolved()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| RadError::io(&cfg.output_dir, e))?;
    cfg.save(&cfg.output_dir.join("config.json"))?;
    log::info!("stage {stage}");
    let mut ctx = Ctx::new(&cfg, stage);
    match stage {
        Stage::Simulate => simulate(&mut ctx)?,
        Stage::Split => split(&mut ctx)?,
        Stage::Cluster => cluster_users(&mut ctx)?,
        Stage::BuildCdfs => build_cdfs(&mut ctx)?,
        Stage::TrainEmbed => train_embed(&mut ctx)?,
        Stage::Label => label(&mut ctx)?,
        Stage::TrainModel => train_model(&mut ctx)?,
        Stage::Evaluate => evaluate(&mut ctx)?,
        Stage::Report => report(&mut ctx)?,
    }
    ctx.finish()
}

/// Runs every stage the config needs, in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    let resolved = cfg.resolved()?;
    resolved.stages().into_iter().map(|s| run_stage(s, cfg)).collect()
}

fn simulate(ctx: &mut Ctx<'_>) -> Result<()> {
    let (records, truth) = synth::generate(&ctx.cfg.synth)?;
    log::info!("simulated {} interactions", records.len());
    data::write_csv(&ctx.output("data/interactions.csv")?, &records)?;
    for f in [synth::TRUTH_FILE, synth::TRUTH_USERS_FILE, synth::TRUTH_VIDEOS_FILE] {
        ctx.output(&format!("data/{f}"))?;
    }
    synth::write_ground_truth(&ctx.path("data"), &truth)
}

/// Cut-offs and partition statistics of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub spec: SplitSpec,
    pub malformed_input_rows: usize,
    pub report: SplitReport,
}

fn split(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let ingested = match &cfg.input {
        Some(path) => {
            ctx.external(path)?;
            data::ingest(path, &cfg.schema)?
        }
        None => data::ingest(&ctx.input("data/interactions.csv", Stage::Simulate)?, &Schema::default())?,
    };
    if ingested.malformed > 0 {
        log::warn!("skipped {} malformed rows: {:?}", ingested.malformed, ingested.problems);
    }
    let spec = cfg.split.spec_for(&ingested.records)?;
    let parts = data::chrono_split(&ingested.records, &spec)?;
    let binner = data::fit_duration_binner(&parts.train, cfg.duration_bins)?;
    data::write_csv(&ctx.output("split/train.csv")?, &parts.train)?;
    data::write_csv(&ctx.output("split/validation.csv")?, &parts.validation)?;
    data::write_csv(&ctx.output("split/test.csv")?, &parts.test)?;
    let summary = SplitSummary {
        spec,
        malformed_input_rows: ingested.malformed,
        report: parts.report,
    };
    write_json(&ctx.output("split/split_report.json")?, &summary)?;
    write_json(&ctx.output("split/binner.json")?, &binner)
}

fn cluster_users(ctx: &mut Ctx<'_>) -> Result<()> {
    let train = ctx.records("split/train.csv", Stage::Split)?;
    let users = data::user_features(&train);
    if users.values().all(Vec::is_empty) {
        return Err(RadError::Config(
            "clustering needs categorical user features; the training data has none".into(),
        ));
    }
    let model = cluster::fit_kmodes(&users, &ctx.cfg.cluster)?;
    log::info!("k-modes: {} clusters, cost {}, {} iterations", model.k, model.cost, model.iterations);
    cluster::write_cluster_map(&ctx.output("cluster/clusters.csv")?, &model.cluster_map())?;
    write_json(&ctx.output("cluster/kmodes.json")?, &model)
}

fn build_cdfs(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let train = ctx.records("split/train.csv", Stage::Split)?;
    let binner = ctx.binner()?;
    let clusters = ctx.clusters(cfg.user_cohort == CohortKind::UserClusterXDurationbin)?;
    let kinds = [
        ("video", CohortKind::Video),
        ("user", cfg.user_cohort),
        ("d2q", CohortKind::DurationBin),
    ];
    for (name, kind) in kinds {
        let table = ecdf::build_cdfs(&train, kind, Some(&binner), clusters.as_ref(), cfg.tie_rule)?;
        log::info!("{} {} cohorts over {} samples", table.len(), kind.name(), table.total_samples());
        table.save(&ctx.output(&format!("cdfs/{name}.json"))?)?;
    }
    Ok(())
}

/// Loss curve of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub best_epoch: usize,
    pub initial_loss: Option<f64>,
    pub curve: Vec<EpochStats>,
}

fn embed_kinds(cfg: &PipelineConfig) -> [(&'static str, CohortKind); 3] {
    [
        ("video", CohortKind::Video),
        ("user", cfg.embed.user_kind),
        ("d2q", CohortKind::DurationBin),
    ]
}

fn train_embed(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let train = ctx.records("split/train.csv", Stage::Split)?;
    let validation = ctx.records("split/validation.csv", Stage::Split)?;
    let binner = ctx.binner()?;
    let clusters = ctx.clusters(cfg.embed.user_kind == CohortKind::UserClusterXDurationbin)?;
    let mut curves = BTreeMap::new();
    for (name, kind) in embed_kinds(cfg) {
        let tr = distembed::cohort_samples(&train, kind, Some(&binner), clusters.as_ref());
        let va = distembed::cohort_samples(&validation, kind, Some(&binner), clusters.as_ref());
        let mut tcfg = cfg.embed.training.clone();
        tcfg.seed = seed::derive(tcfg.seed, name, 0);
        log::info!("training {} quantile model on {} cohorts", kind.name(), tr.len());
        let trained = distembed::train(&tr, &va, &cfg.embed.model, &tcfg)?;
        trained.model.save(&ctx.output(&format!("embed/{name}.bin"))?)?;
        curves.insert(
            name,
            CurveRecord {
                best_epoch: trained.best_epoch,
                initial_loss: Some(trained.initial_loss),
                curve: trained.curve,
            },
        );
    }
    write_json(&ctx.output("embed/curves.json")?, &curves)
}

const PARTS: [&str; 3] = ["train", "validation", "test"];

fn label(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let binner = ctx.binner()?;
    let sources = Sources::load(ctx)?;
    let clusters = ctx.clusters(sources.user_kind == CohortKind::UserClusterXDurationbin)?;
    let src = LabelSources {
        video: sources.video.as_ref(),
        user: sources.user.as_ref(),
        user_kind: sources.user_kind,
        d2q: sources.d2q.as_ref(),
        binner: &binner,
        clusters: clusters.as_ref(),
        clip_pcr: cfg.clip_pcr,
    };
    for part in PARTS {
        let records = ctx.records(&format!("split/{part}.csv"), Stage::Split)?;
        let labels = ecdf::label_records(&records, &src);
        let cold = labels.iter().filter(|l| l.cold_video || l.cold_user || l.cold_d2q).count();
        if cold > 0 {
            log::warn!("{part}: {cold} records fell back to the cold-start label");
        }
        ecdf::write_labels_csv(&ctx.output(&format!("labels/{part}.csv"))?, &records, &labels)?;
    }
    Ok(())
}

fn label_values(kind: LabelKind, labels: &[RecordLabels]) -> Vec<f64> {
    labels.iter().map(|l| kind.value(l)).collect()
}

fn kind_index(kind: LabelKind) -> u64 {
    LabelKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64
}

fn train_model(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let (train, train_labels) = ecdf::read_labels_csv(&ctx.input("labels/train.csv", Stage::Label)?)?;
    let (val, val_labels) = ecdf::read_labels_csv(&ctx.input("labels/validation.csv", Stage::Label)?)?;
    let mut curves = BTreeMap::new();
    for &kind in &cfg.labels {
        let mut tcfg = cfg.training.clone();
        tcfg.seed = seed::derive(tcfg.seed, kind.name(), kind_index(kind));
        log::info!("training {kind} regressor on {} records", train.len());
        let trained = preference::train_regressor(
            &train,
            &label_values(kind, &train_labels),
            &val,
            &label_values(kind, &val_labels),
            kind,
            &cfg.regressor,
            &tcfg,
        )?;
        trained.model.save(&ctx.output(&format!("models/{}.bin", kind.name()))?)?;
        curves.insert(
            kind.name(),
            CurveRecord {
                best_epoch: trained.best_epoch,
                initial_loss: None,
                curve: trained.curve,
            },
        );
    }
    write_json(&ctx.output("models/curves.json")?, &curves)
}

/// Metrics of one evaluated method plus fallback bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Predictions mapped through the global training distribution.
    pub fallback: usize,
    /// Test records with an id unseen by the model.
    pub cold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub test_records: usize,
    /// Grouped metrics against the latent preference were computed.
    pub ground_truth: bool,
    pub fusion: FusionPolicy,
    pub methods: BTreeMap<String, MethodReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFitReport {
    pub min_support: usize,
    /// Per cohort kind; kinds with no eligible cohort are left out.
    pub fits: Vec<FitSummary>,
}

/// Per-record predictions of one method.
struct MethodPredictions {
    name: String,
    score: Vec<f64>,
    watch: Vec<f64>,
    mapped: Vec<Option<f64>>,
    fused: Vec<Option<f64>>,
    fallback: Vec<bool>,
    cold: Vec<bool>,
}

fn score_method(
    m: &MethodPredictions,
    test: &[InteractionRecord],
    preference: Option<&[f64]>,
) -> Result<MethodReport> {
    let truth: Vec<f64> = test.iter().map(|r| r.watch_time).collect();
    let users: Vec<u64> = test.iter().map(|r| r.user_id).collect();
    let videos: Vec<u64> = test.iter().map(|r| r.video_id).collect();
    let xg = metrics::xgauc(&m.watch, &truth, &users)?;
    let mut report = MetricsReport {
        mae: metrics::mae(&m.watch, &truth)?,
        xauc: metrics::xauc(&m.watch, &truth)?,
        xgauc: xg.pair_weighted,
        xgauc_group_mean: xg.group_mean,
        xgauc_pairs: xg.total_pairs,
        wasserstein: Some(metrics::wasserstein1(&m.watch, &truth)?),
        ..MetricsReport::default()
    };
    if let Some(p) = preference {
        let ug = metrics::grouped_xauc(&m.score, p, &users)?;
        let vg = metrics::grouped_xauc(&m.score, p, &videos)?;
        report.user_group_xauc = Some(ug.pair_weighted);
        report.user_group_xauc_pairs = Some(ug.total_pairs);
        report.video_group_xauc = Some(vg.pair_weighted);
        report.video_group_xauc_pairs = Some(vg.total_pairs);
    }
    Ok(MethodReport {
        metrics: report,
        fallback: m.fallback.iter().filter(|&&f| f).count(),
        cold: m.cold.iter().filter(|&&c| c).count(),
    })
}

fn ground_truth_preference(ctx: &mut Ctx<'_>, test: &[InteractionRecord]) -> Result<Option<Vec<f64>>> {
    if ctx.cfg.input.is_some() || !ctx.path(&format!("data/{}", synth::TRUTH_FILE)).is_file() {
        return Ok(None);
    }
    for f in [synth::TRUTH_FILE, synth::TRUTH_USERS_FILE, synth::TRUTH_VIDEOS_FILE] {
        ctx.input(&format!("data/{f}"), Stage::Simulate)?;
    }
    let truth = synth::read_ground_truth(&ctx.path("data"))?;
    let map = truth.preference_map();
    test.iter()
        .map(|r| {
            map.get(&(r.user_id, r.video_id)).copied().ok_or_else(|| RadError::BadArtifact {
                path: ctx.path(&format!("data/{}", synth::TRUTH_FILE)),
                reason: format!("no latent preference for user {} video {}", r.user_id, r.video_id),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn evaluate(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let (test, test_labels) = ecdf::read_labels_csv(&ctx.input("labels/test.csv", Stage::Label)?)?;
    if test.is_empty() {
        return Err(RadError::EmptyInput("test partition is empty".into()));
    }
    let mut models = Vec::new();
    for &kind in &cfg.labels {
        models.push(MlpRegressor::load(&ctx.input(&format!("models/{}.bin", kind.name()), Stage::TrainModel)?)?);
    }
    let train = ctx.records("split/train.csv", Stage::Split)?;
    let binner = ctx.binner()?;
    let sources = Sources::load(ctx)?;
    let fit_user_kind = cfg.evaluation.distribution_fit && cfg.embed.user_kind == CohortKind::UserClusterXDurationbin;
    let clusters = ctx.clusters(sources.user_kind == CohortKind::UserClusterXDurationbin || fit_user_kind)?;
    let global = preference::global_cdf(&train).ok_or_else(|| RadError::EmptyInput("training partition is empty".into()))?;
    let preference_truth = ground_truth_preference(ctx, &test)?;

    let mut methods: Vec<MethodPredictions> = Vec::new();
    for model in &models {
        let kind = model.kind();
        let preds = model.predict_all(&test);
        let estimates = crate::par::map_range(test.len(), |i| {
            let (src, key) = sources.for_kind(kind, &test[i], &binner, clusters.as_ref());
            preference::predict_watch_time(kind, preds[i].0, &test[i], src, key, &global)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        methods.push(MethodPredictions {
            name: kind.name().into(),
            score: preds.iter().map(|p| p.0).collect(),
            watch: estimates.iter().map(|e| e.watch_time).collect(),
            mapped: estimates.iter().map(|e| e.mapped).collect(),
            fused: vec![None; test.len()],
            fallback: estimates.iter().map(|e| e.fallback).collect(),
            cold: preds.iter().map(|p| p.1).collect(),
        });
    }

    let find = |name: &str| methods.iter().position(|m| m.name == name);
    if let (Some(iu), Some(iv)) = (find(LabelKind::RadU.name()), find(LabelKind::RadV.name())) {
        let (u, v) = (&methods[iu], &methods[iv]);
        let mut fused = MethodPredictions {
            name: RAD_UV.into(),
            score: Vec::with_capacity(test.len()),
            watch: Vec::with_capacity(test.len()),
            mapped: Vec::with_capacity(test.len()),
            fused: Vec::with_capacity(test.len()),
            fallback: Vec::with_capacity(test.len()),
            cold: Vec::with_capacity(test.len()),
        };
        for (i, l) in test_labels.iter().enumerate() {
            let w = FusionWeights::resolve(cfg.fusion, l.n_user, l.n_video)?;
            let q = preference::combine_uv_quantile(u.score[i], v.score[i], w)?.q_fused;
            let (watch, fallback) = match preference::combine_uv_watch_time(u.mapped[i], v.mapped[i]) {
                Some((x, partial)) => (x, partial),
                None => ((u.watch[i] + v.watch[i]) / 2.0, true),
            };
            fused.score.push(q);
            fused.watch.push(watch);
            fused.mapped.push(None);
            fused.fused.push(Some(q));
            fused.fallback.push(fallback);
            fused.cold.push(u.cold[i] || v.cold[i]);
        }
        methods.push(fused);
    }

    let mut rows = Vec::with_capacity(methods.len() * test.len());
    let mut report = EvaluationReport {
        test_records: test.len(),
        ground_truth: preference_truth.is_some(),
        fusion: cfg.fusion,
        methods: BTreeMap::new(),
    };
    for m in &methods {
        report
            .methods
            .insert(m.name.clone(), score_method(m, &test, preference_truth.as_deref())?);
        for (i, r) in test.iter().enumerate() {
            rows.push(PredictionRow {
                user_id: r.user_id,
                video_id: r.video_id,
                timestamp: r.timestamp,
                method: m.name.clone(),
                predicted: m.score[i],
                mapped_watch_time: m.mapped[i],
                watch_time: m.watch[i],
                fused_quantile: m.fused[i],
                fallback: m.fallback[i],
                cold: m.cold[i],
            });
        }
    }
    preference::write_predictions(&ctx.output("eval/predictions.csv")?, &rows)?;
    write_json(&ctx.output("eval/metrics.json")?, &report)?;
    write_metric_rows(&ctx.output("eval/metrics.csv")?, &report)?;

    if cfg.evaluation.distribution_fit {
        let mut fits = Vec::new();
        for (name, kind) in embed_kinds(cfg).into_iter().take(2) {
            let learned = ctx.embed_model(name)?.snapshot();
            let tr = distembed::cohort_samples(&train, kind, Some(&binner), clusters.as_ref());
            let held = distembed::cohort_samples(&test, kind, Some(&binner), clusters.as_ref());
            match distembed::fit_against_heldout(&learned, &tr, &held, kind, cfg.evaluation.min_fit_support) {
                Ok(fit) => {
                    log::info!(
                        "{}: learned W1 {:.3} vs train-ECDF floor {:.3} over {} cohorts",
                        kind.name(),
                        fit.mean_w1_learned,
                        fit.mean_w1_ecdf,
                        fit.cohorts.len()
                    );
                    fits.push(fit);
                }
                Err(RadError::EmptyInput(msg)) => log::warn!("distribution fit skipped: {msg}"),
                Err(e) => return Err(e),
            }
        }
        let fit_report = DistributionFitReport {
            min_support: cfg.evaluation.min_fit_support,
            fits,
        };
        write_json(&ctx.output("eval/distribution_fit.json")?, &fit_report)?;
    }
    Ok(())
}

/// Backbone recorded in flat metric rows; only the MLP is implemented.
pub const BACKBONE: &str = "mlp";

/// One `label_kind,backbone,metric,value` row per reported number.
fn write_metric_rows(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["label_kind", "backbone", "metric", "value"])?;
    for (method, r) in &report.methods {
        let Value::Object(fields) = serde_json::to_value(&r.metrics)? else {
            continue;
        };
        for (metric, value) in fields {
            if let Some(v) = value.as_f64() {
                w.write_record([method.as_str(), BACKBONE, metric.as_str(), &v.to_string()])?;
            }
        }
    }
    flush(w, path)
}

/// Method order used in the report tables.
pub const METHOD_ORDER: [&str; 6] = ["raw", "pcr", "d2q", "rad_u", "rad_v", RAD_UV];

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| RadError::BadArtifact {
        path: path.into(),
        reason: e.to_string(),
    })
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| RadError::io(path, e))
}

fn report(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let eval: EvaluationReport = read_json(&ctx.input("eval/metrics.json", Stage::Evaluate)?)?;
    let ordered: Vec<(&str, &MethodReport)> = METHOD_ORDER
        .iter()
        .filter_map(|&m| eval.methods.get(m).map(|r| (m, r)))
        .collect();

    let path = ctx.output("report/table1.csv")?;
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "mae", "xauc", "xgauc", "xgauc_group_mean", "wasserstein", "fallback", "cold"])?;
    for (name, r) in &ordered {
        let m = &r.metrics;
        w.write_record([
            name.to_string(),
            fmt_f(m.mae),
            fmt_f(m.xauc),
            fmt_f(m.xgauc),
            fmt_f(m.xgauc_group_mean),
            fmt_opt(m.wasserstein),
            r.fallback.to_string(),
            r.cold.to_string(),
        ])?;
    }
    flush(w, &path)?;

    let path = ctx.output("report/table2.csv")?;
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "user_group_xauc", "video_group_xauc", "xgauc"])?;
    for (name, r) in &ordered {
        let m = &r.metrics;
        w.write_record([
            name.to_string(),
            fmt_opt(m.user_group_xauc),
            fmt_opt(m.video_group_xauc),
            fmt_f(m.xgauc),
        ])?;
    }
    flush(w, &path)?;

    let fits = if cfg.evaluation.distribution_fit {
        read_json::<DistributionFitReport>(&ctx.input("eval/distribution_fit.json", Stage::Evaluate)?)?.fits
    } else {
        Vec::new()
    };
    let path = ctx.output("report/table3.csv")?;
    let mut w = csv_writer(&path)?;
    w.write_record(["cohort_kind", "estimator", "cohorts", "mean_w1", "ratio_to_floor"])?;
    for fit in &fits {
        let n = fit.cohorts.len().to_string();
        w.write_record([fit.kind.name(), "train_ecdf", &n, &fmt_f(fit.mean_w1_ecdf), &fmt_f(1.0)])?;
        w.write_record([
            fit.kind.name(),
            "learned_multiquantile",
            &n,
            &fmt_f(fit.mean_w1_learned),
            &fmt_f(fit.ratio),
        ])?;
    }
    flush(w, &path)?;

    let path = ctx.output("report/densities.csv")?;
    let mut w = csv_writer(&path)?;
    w.write_record(["cohort_kind", "cohort", "series", "index", "value"])?;
    if !fits.is_empty() {
        let train = ctx.records("split/train.csv", Stage::Split)?;
        let test = ctx.records("split/test.csv", Stage::Split)?;
        let binner = ctx.binner()?;
        let clusters = ctx.clusters(fits.iter().any(|f| f.kind == CohortKind::UserClusterXDurationbin))?;
        for fit in &fits {
            let name = embed_kinds(cfg)
                .into_iter()
                .find(|(_, k)| *k == fit.kind)
                .map(|(n, _)| n)
                .unwrap_or("video");
            let model = ctx.embed_model(name)?;
            let tr = distembed::cohort_samples(&train, fit.kind, Some(&binner), clusters.as_ref());
            let held = distembed::cohort_samples(&test, fit.kind, Some(&binner), clusters.as_ref());
            let mut largest: Vec<(usize, CohortKey)> = fit.cohorts.iter().map(|c| (c.train_samples, c.cohort)).collect();
            largest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, key) in largest.into_iter().take(cfg.report.density_cohorts) {
                let mut series = vec![
                    ("train", tr.get(&key).cloned().unwrap_or_default()),
                    ("heldout", held.get(&key).cloned().unwrap_or_default()),
                    ("learned", model.breakpoints(&key)?),
                ];
                for (label, values) in &mut series {
                    values.sort_by(f64::total_cmp);
                    for (i, v) in values.iter().enumerate() {
                        w.write_record([
                            fit.kind.name().to_string(),
                            key.to_string(),
                            label.to_string(),
                            i.to_string(),
                            fmt_f(*v),
                        ])?;
                    }
                }
            }
        }
    }
    flush(w, &path)
}
