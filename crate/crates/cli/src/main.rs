//! `sfanet`: ingest, categorize, cluster, crop, train, predict, evaluate,
//! calibrate and schedule from the command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] sfanet_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sfanet", version, about = "Spatial-frequency deepfake detection pipeline")]
struct Cli {
    /// TOML run configuration (falls back to $SFANET_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Number of fake clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Use the built-in stub face-parts and attribute providers.
    #[arg(long, global = true)]
    stub_providers: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and its images, or generate a synthetic corpus.
    Ingest(IngestArgs),
    /// Assign race/emotion categories and report per-category counts.
    Categorize(CategorizeArgs),
    /// Cluster the fake images into k groups.
    Cluster(ClusterArgs),
    /// Extract eyes and lips crops.
    Crop(CropArgs),
    /// Run the sequential cluster-wise training schedule.
    Train(TrainArgs),
    /// Score images with the ensemble or the facecrop baseline.
    Predict(PredictArgs),
    /// Compute metrics for a score file.
    Evaluate(EvaluateArgs),
    /// Sweep decision thresholds over a score file.
    Calibrate(CalibrateArgs),
    /// Print the training schedule.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Canonical manifest output.
    #[arg(long, conflicts_with = "synthetic")]
    pub out: Option<PathBuf>,
    /// Generate a synthetic corpus into this directory.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub n_real: usize,
    #[arg(long, default_value_t = 400)]
    pub n_fake: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct CategorizeArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, requires = "validation")]
    pub validation_out: Option<PathBuf>,
    /// Per-category counts as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// `clusters.json` from `cluster`; computed on the fly when absent.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Start from these weights instead of a seeded initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictMode {
    Ensemble,
    Facecrop,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = PredictMode::Ensemble)]
    pub mode: PredictMode,
    #[arg(long)]
    pub swinatten: Option<PathBuf>,
    #[arg(long)]
    pub swinfusion: Option<PathBuf>,
    #[arg(long)]
    pub sfnet: Option<PathBuf>,
    #[arg(long)]
    pub eyes: Option<PathBuf>,
    #[arg(long)]
    pub lips: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Ground-truth labels; defaults to the manifest recorded with the scores.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Metric report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated thresholds; defaults to 0.05..=0.95 in steps of 0.05.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub finetune: Option<usize>,
    /// Print only; write nothing.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        threshold: cli.threshold,
        k: cli.k,
        stub_providers: cli.stub_providers,
    });
    cfg.validate()?;
    let ctx = commands::Context::new(cfg);
    match cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Categorize(a) => commands::categorize(&ctx, a),
        Command::Cluster(a) => commands::cluster(&ctx, a),
        Command::Crop(a) => commands::crop(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Calibrate(a) => commands::calibrate(&ctx, a),
        Command::Schedule(a) => commands::schedule(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
