//! The `codealign` command line.

pub mod config;
mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codealign::eval::ReportFormat;
use codealign::pipeline::Method;
use thiserror::Error;

pub use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    /// Every query in a non-empty batch failed.
    #[error("{0}")]
    AllFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::AllFailed(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "codealign", version, about = "Zero-shot terminology coding with deferral to human review")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true, default_value = "codealign.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and persist BM25 and dense indices for every configured terminology.
    Index,
    /// Code a JSON-lines batch of queries into a JSON-lines decisions file.
    Code(CodeArgs),
    /// Accuracy and set coverage per level, with common/uncommon splits.
    Evaluate(EvaluateArgs),
    /// Accuracy as a function of the deferred fraction.
    DeferCurve(CurveArgs),
    /// Fit a split conformal calibrator on labelled decisions.
    Calibrate(CalibrateArgs),
    /// Attach conformal prediction sets to decisions.
    ApplyConformal(ApplyConformalArgs),
    /// Candidate provenance and filtering statistics for ALIGN decisions.
    Ablation(AblationArgs),
    /// Group raw coded records into an evaluation dataset.
    BuildDataset(BuildDatasetArgs),
    /// Run the review HTTP service.
    Serve(ServeArgs),
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct CodeArgs {
    /// Queries, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// ALIGN, LLM, LLM_COT, RAG or RAG_COT.
    #[arg(long, value_parser = parse_method, default_value = "ALIGN")]
    pub method: Method,
    #[arg(long)]
    pub output: PathBuf,
    /// Seed per repeat; repeat the flag for several runs. Defaults to
    /// `evaluation.seeds` (itself defaulting to 0).
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
}

/// Labelled data: an items file (JSON lines) or raw coded records (CSV).
#[derive(Debug, Args)]
pub struct GoldArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// System for a raw CSV gold file; defaults to the first terminology.
    #[arg(long)]
    pub system: Option<String>,
    /// Target level for a raw CSV gold file.
    #[arg(long)]
    pub level: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    #[command(flatten)]
    pub gold: GoldArgs,
    #[arg(long)]
    pub output: PathBuf,
    /// Comma-separated levels to report.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<String>>,
    /// csv, json or text; defaults from the output extension.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    #[command(flatten)]
    pub gold: GoldArgs,
    #[arg(long)]
    pub output: PathBuf,
    /// Comma-separated deferral fractions in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Level at which correctness is judged; defaults to the target level.
    #[arg(long = "at-level")]
    pub at_level: Option<String>,
    /// Which run to use when the file holds several seeds.
    #[arg(long)]
    pub run: Option<u64>,
    /// Base seed for the random-deferral baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    #[command(flatten)]
    pub gold: GoldArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyConformalArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    #[arg(long)]
    pub calibrator: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    #[command(flatten)]
    pub gold: GoldArgs,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// CSV with columns term,route,gold_code,study_id.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub level: String,
    /// Items with gold codes, one JSON object per line.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the bare queries, ready for `code`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides `service.bind`.
    #[arg(long)]
    pub bind: Option<String>,
    /// Decisions to enqueue at startup.
    #[arg(long)]
    pub enqueue: Option<PathBuf>,
    /// Enqueue the most uncertain fraction instead of records flagged deferred.
    #[arg(long)]
    pub budget: Option<f64>,
}

/// Runs a parsed command line, printing errors to stderr.
pub fn run(cli: Cli) -> ExitCode {
    let result = Config::load(&cli.config).and_then(|config| commands::dispatch(&config, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
