use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rad_core::pipeline::{self, CdfSource, PipelineConfig, Stage, StageOutcome};
use rad_core::preference::LabelKind;
use rad_core::{RadError, Result};
use serde_json::Value;

/// Quantile-based watch-time debiasing pipeline.
#[derive(Debug, Parser)]
#[command(name = "rad", version)]
struct Cli {
    /// JSON pipeline config. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Interaction log to ingest instead of simulated data.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// `empirical` or `learned`.
    #[arg(long, global = true)]
    cdf_source: Option<CdfSource>,
    /// Comma-separated label kinds (raw, pcr, d2q, rad_u, rad_v).
    #[arg(long, global = true, value_delimiter = ',')]
    labels: Option<Vec<LabelKind>>,
    /// Override any config key: `--set training.max_epochs=10`. The value is
    /// parsed as JSON and taken as a string when that fails.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic interactions with known latent preference.
    Simulate,
    /// Ingest and split interactions chronologically; fit duration bins.
    Split,
    /// Cluster users on categorical features with k-modes.
    Cluster,
    /// Build per-cohort empirical watch-time distributions.
    BuildCdfs,
    /// Train multiquantile embedding models.
    TrainEmbed,
    /// Compute quantile labels for every partition.
    Label,
    /// Train stage-2 regressors.
    TrainModel,
    /// Score test predictions.
    Evaluate,
    /// Write result tables and density data.
    Report,
    /// Run every stage the config needs, in order.
    All,
    /// Print the effective config as JSON.
    Config,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| RadError::Config(format!("`{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut doc = serde_json::to_value(&base)?;
    let mut set = |key: &str, value: Value| set_path(&mut doc, key, value);
    if let Some(dir) = &cli.output_dir {
        set("output_dir", Value::from(dir.display().to_string()))?;
    }
    if let Some(seed) = cli.seed {
        set("seed", Value::from(seed))?;
    }
    if let Some(input) = &cli.input {
        set("input", Value::from(input.display().to_string()))?;
    }
    if let Some(src) = cli.cdf_source {
        set("cdf_source", serde_json::to_value(src)?)?;
    }
    if let Some(labels) = &cli.labels {
        set("labels", serde_json::to_value(labels)?)?;
    }
    for o in &cli.overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| RadError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
        set(key.trim(), value)?;
    }
    serde_json::from_value(doc).map_err(|e| RadError::Config(e.to_string()))
}

fn print_outcome(o: &StageOutcome) {
    println!("{}: manifest {}", o.stage, o.manifest.display());
    for p in &o.outputs {
        println!("  {}", p.display());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(RadError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RadError::Config(e.to_string()))?;
    }
    let stage = match cli.command {
        Command::Simulate => Stage::Simulate,
        Command::Split => Stage::Split,
        Command::Cluster => Stage::Cluster,
        Command::BuildCdfs => Stage::BuildCdfs,
        Command::TrainEmbed => Stage::TrainEmbed,
        Command::Label => Stage::Label,
        Command::TrainModel => Stage::TrainModel,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        Command::All => {
            pipeline::run_all(&cfg)?.iter().for_each(print_outcome);
            return Ok(());
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg.resolved()?)?);
            return Ok(());
        }
    };
    print_outcome(&pipeline::run_stage(stage, &cfg)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
