//! `cabernet` command-line interface.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cabernet::trainer::{BatchStrategy, Variant};
use cabernet::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "cabernet", version, about = "Causal representation learning for cross-domain energy prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain bundle from an SCM spec.
    Generate(GenerateArgs),
    /// Convert raw per-domain sensor CSVs into a bundle.
    Ingest(IngestArgs),
    /// Train one model with one held-out domain.
    Train(TrainArgs),
    /// Leave-one-domain-out sweep for one variant.
    Lodo(LodoArgs),
    /// Variant x latent-size ablation grid.
    Ablate(AblateArgs),
    /// Gate weights, input Jacobians and latent SCM of a checkpoint.
    Explain(ExplainArgs),
    /// DirectLiNGAM graph and Markov blanket of a target.
    Discover(DiscoverArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// SCM spec (JSON); the built-in eight-feature spec when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    /// Rows per domain before the spec's size factors.
    #[arg(long, default_value_t = cabernet::data::DEFAULT_ROWS_PER_DOMAIN)]
    pub rows: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Ingest settings (TOML with `[schema]` and `[gaps]` tables).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One CSV per domain; the file stem is the domain id.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides applied on top of the training config file.
#[derive(Debug, Args, Clone)]
pub struct TrainOverrides {
    /// Training config (TOML); the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<BatchStrategy>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Drop the scale encoder and predict on the standardized target scale.
    #[arg(long)]
    pub no_scale_encoder: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Held-out domain id; the last domain of the bundle when omitted.
    #[arg(long)]
    pub holdout: Option<String>,
}

#[derive(Debug, Args)]
pub struct LodoArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Restrict to these held-out domains (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    #[arg(long, value_delimiter = ',', default_value = "erm,sirm,noindy,full")]
    pub variants: Vec<Variant>,
    #[arg(long = "hidden", value_delimiter = ',', default_value = "8,16,32")]
    pub hiddens: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bundle holding the domain to explain.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Domain to explain; the last domain of the bundle when omitted.
    #[arg(long)]
    pub holdout: Option<String>,
    #[arg(long, default_value_t = cabernet::explain::DEFAULT_EXPLAIN_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Pruning threshold for the latent SCM.
    #[arg(long, default_value_t = cabernet::causal::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// A numeric CSV, or a bundle directory whose training rows are pooled.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target column; the bundle's target when omitted.
    #[arg(long)]
    pub target: Option<String>,
    /// One graph is written per threshold.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    pub threshold: Vec<f64>,
    /// Bundle mode: exclude this domain from discovery.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Bundle mode: also train ERM on the discovered blanket for each
    /// held-out domain (requires a training config or uses the desk preset).
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<cabernet::Error>() {
        return match e.kind() {
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numerical => EXIT_NUMERICAL,
            ErrorKind::Io => EXIT_IO,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    if err.downcast_ref::<serde_json::Error>().is_some() || err.downcast_ref::<csv::Error>().is_some() {
        return EXIT_DATA;
    }
    EXIT_CONFIG
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::Train(a) => commands::train(&a),
        Command::Lodo(a) => commands::lodo(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::Discover(a) => commands::discover(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
