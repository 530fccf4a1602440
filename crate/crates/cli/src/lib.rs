//! Command-line driver for the multiclip pipeline: dataset generation,
//! pre-training, fine-tuning, evaluation, embedding export and ablations.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use multiclip::scene_data::Split;
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] multiclip::Error),
}

impl CliError {
    /// 2 for configuration and usage problems, 1 for everything that fails
    /// after work has started.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Core(multiclip::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "multiclip", version, about = "3D scene / text / image contrastive pre-training and 3D question answering")]
pub struct Cli {
    /// Worker threads for data-parallel steps (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the canonical directory layout.
    GenData(GenDataArgs),
    /// Pre-train the scene encoder against text and multi-view image embeddings.
    Pretrain(PretrainArgs),
    /// Fine-tune the 3D-VQA model.
    FinetuneVqa(FinetuneArgs),
    /// Fine-tune the 3D-SQA model.
    FinetuneSqa(FinetuneArgs),
    /// Evaluate a VQA checkpoint or prediction dump.
    EvalVqa(EvalArgs),
    /// Evaluate an SQA checkpoint or prediction dump.
    EvalSqa(EvalArgs),
    /// Export scene embeddings of a pre-trained checkpoint.
    Embed(EmbedArgs),
    /// Project an embedding table to 2D.
    Project(ProjectArgs),
    /// Pre-train each loss ablation and compare SQA EM@1.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of training scenes (overrides the configuration).
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Number of test scenes (overrides the configuration).
    #[arg(long)]
    pub test_scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root; the configured synthetic data is generated in memory when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Precomputed text/view embeddings (JSON) replacing the reference encoders.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Write every rendered view as PNG into this directory.
    #[arg(long)]
    pub dump_views: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pre-trained checkpoint; the scene encoder starts from random weights when omitted.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fine-tuned checkpoint to predict with.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Existing prediction dump to score instead of predicting.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Embedding table written by `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            eprintln!("error: {}", first_line(&msg).trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            e.exit_code()
        }
    }
}

fn first_line(s: &str) -> &str {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or(s)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cli.jobs)))?;
    pool.install(|| commands::dispatch(cli.command))
}
