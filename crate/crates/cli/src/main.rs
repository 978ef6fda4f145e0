//! `slicemap`: phantom generation, training, dense generation and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slicemap::eval::GenerationMode;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "slicemap",
    version,
    about = "Sparse-to-dense volume generation from posed slices"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,

    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantom volumes.
    Phantom(PhantomArgs),
    /// Train a model on a directory of volumes.
    Train(TrainArgs),
    /// Densely generate a volume from a few slices of a subject.
    Generate(GenerateArgs),
    /// Score dense generation on a test set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    /// `Z,Y,X` in voxels.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<[usize; 3]>,
    /// Base seed; volume `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint and loss curve.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated pose indices taken from the subject; empty samples the prior.
    #[arg(long, default_value = "", value_parser = parse_list)]
    pub contexts: IndexList,
    /// Volume providing the context slices.
    #[arg(long)]
    pub subject: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<GenerationMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output `.vol` path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one PGM per generated slice into this directory.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_list)]
    pub context_counts: Option<IndexList>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<GenerationMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for metric and curve CSVs.
    #[arg(long)]
    pub report: PathBuf,
    /// Also run the motion comparison with this maximum translation in voxels.
    #[arg(long)]
    pub motion: Option<usize>,
}

/// A comma-separated list given as one argument. A bare `Vec` field would
/// make clap expect repeated flags instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexList(pub Vec<usize>);

fn parse_list(s: &str) -> Result<IndexList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("not a non-negative integer: {p:?}")))
        .collect::<Result<_, _>>()
        .map(IndexList)
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v = parse_list(s)?.0;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected Z,Y,X, got {s:?}"))
}

fn parse_mode(s: &str) -> Result<GenerationMode, String> {
    s.parse().map_err(|e: slicemap::Error| e.to_string())
}

/// Errors the user can fix by changing the command line.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let config = RunConfig::load(cli.config.as_deref())?;
    if cli.print_config {
        print!("{}", config.to_json());
        return Ok(());
    }
    match cli.command {
        None => Err(UsageError("no command given (try --help)".into()).into()),
        Some(Command::Phantom(a)) => commands::phantom(config, a),
        Some(Command::Train(a)) => commands::train(config, cli.config.is_some(), a),
        Some(Command::Generate(a)) => commands::generate(config, a),
        Some(Command::Eval(a)) => commands::eval(config, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
