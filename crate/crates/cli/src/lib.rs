//! Command-line front end for latprune.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use manifest::{DataSpec, RunManifest};

/// Exit status contract.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const INPUT: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const PROVIDER: i32 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "latprune", version, about = "Latency-aware structured channel pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the channel groups of a model.
    Analyze(ModelArgs),
    /// Run the pruning search.
    Prune(Box<PruneArgs>),
    /// Latency of one channel group as it shrinks, as CSV.
    Curve(CurveArgs),
    /// Inspect a latency cache.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
    /// Write a small reference model.
    Toy(ToyArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Channel importance files.
    Importance {
        #[command(subcommand)]
        command: ImportanceCommand,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Tensor blob; defaults to the model path with a `.bin` extension.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// CSV dataset; synthetic blobs matching the model are used otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    /// Number of synthetic examples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct PruneArgs {
    /// TOML run manifest; flags override its values.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// `3.5ms` for an absolute goal, `0.5` for a fraction of the root latency.
    #[arg(long)]
    pub goal: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Beam width.
    #[arg(long)]
    pub alive: Option<usize>,
    /// `analytical[:k=v,...]`, `replay:<file>` or `command:<template>`.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_early_stop: bool,
    /// `sqrt`, `log` or `fixed:<k>`.
    #[arg(long)]
    pub delta: Option<String>,
    #[arg(long)]
    pub no_finetune: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Precomputed importance file; requires `--no-finetune`.
    #[arg(long)]
    pub importance: Option<PathBuf>,
    /// Spatial, neural and channel reductions, e.g. `sum,linf,sum`.
    #[arg(long)]
    pub reductions: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub group: usize,
    #[arg(long, default_value = "analytical")]
    pub provider: String,
    #[arg(long, default_value = "sqrt")]
    pub delta: String,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Counters, hit rate and the hit/miss timeline of the last run.
    Stats(CacheStatsArgs),
}

#[derive(Debug, Args)]
pub struct CacheStatsArgs {
    #[arg(long)]
    pub cache: PathBuf,
    /// With `--provider`, check the cache was built for this model.
    #[arg(long, requires = "provider")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub provider: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    Mlp,
    Conv,
    Residual,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    pub kind: ToyKind,
    /// Input features (mlp) or `CxHxW` (conv, residual).
    #[arg(long, default_value = "16")]
    pub input: String,
    /// Hidden widths (mlp), conv widths (conv) or stem,mid,block (residual).
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 500)]
    pub batches: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ImportanceCommand {
    /// Accumulate importance over training batches without updating weights.
    Export(ImportanceExportArgs),
}

#[derive(Debug, Args)]
pub struct ImportanceExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 32)]
    pub batches: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: exit::INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<latprune::Error> for Failure {
    fn from(e: latprune::Error) -> Self {
        let code = match &e {
            latprune::Error::Infeasible { .. } => exit::INFEASIBLE,
            e if e.is_provider_failure() => exit::PROVIDER,
            _ => exit::INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        latprune::Error::from(e).into()
    }
}

pub type Outcome = Result<(), Failure>;

/// Runs a parsed command and returns its exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Analyze(args) => commands::analyze(&args),
        Command::Prune(args) => commands::prune(&args),
        Command::Curve(args) => commands::curve(&args),
        Command::Cache {
            command: CacheCommand::Stats(args),
        } => commands::cache_stats(&args),
        Command::Toy(args) => commands::toy(&args),
        Command::Train(args) => commands::train(&args),
        Command::Importance {
            command: ImportanceCommand::Export(args),
        } => commands::importance_export(&args),
    };
    match result {
        Ok(()) => exit::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
