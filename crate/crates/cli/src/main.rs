//! `btr`: build, compress and query binary token stores.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
//! violation.

mod commands;
mod knobs;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use knobs::Knobs;

#[derive(Parser, Debug)]
#[command(name = "btr", version, about = "Binary token representations for retrieval-augmented readers")]
struct Cli {
    /// Log more (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Binarize every passage of a corpus into a new store.
    Precompute(PrecomputeArgs),
    /// Compress a store offline.
    Compress(CompressArgs),
    /// Print a store's header fields and storage accounting.
    Stats(StatsArgs),
    /// Answer one query from cached passages.
    Query(QueryArgs),
    /// Train the toy reader through all three steps.
    TrainToy(TrainArgs),
    /// Measure throughput of the cached and uncached paths.
    Bench(BenchArgs),
    /// Run the built-in correctness suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct Output {
    /// Replace the output file if it exists.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
pub struct PrecomputeArgs {
    /// Corpus file, one `<id>\t<text>` per line.
    #[arg(long)]
    corpus: std::path::PathBuf,
    /// Model file (`.btrm`) whose lower layers encode the passages.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Store file to create.
    #[arg(long)]
    out: std::path::PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    /// Store to compress.
    #[arg(long = "in", value_name = "STORE")]
    input: std::path::PathBuf,
    /// Compressed store to create.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Model whose vocabulary resolves stopword words to ids.
    #[arg(long)]
    model: Option<std::path::PathBuf>,
    /// Also write the storage report as CSV here.
    #[arg(long)]
    csv: Option<std::path::PathBuf>,
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Store file to inspect.
    store: std::path::PathBuf,
    /// Print the storage report as CSV instead of key=value lines.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    /// Store holding the passages.
    #[arg(long)]
    store: std::path::PathBuf,
    /// Model the store was precomputed with.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Query text.
    #[arg(long)]
    query: String,
    /// Comma-separated passage ids.
    #[arg(long)]
    passages: String,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training configuration (TOML).
    #[arg(long)]
    config: std::path::PathBuf,
    /// Directory for traces, the model, a corpus and queries.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the decomposition layer.
    #[arg(long)]
    k: Option<usize>,
    /// Runtime merge ratio for the saved model and its evaluation.
    #[arg(long)]
    runtime_ratio: Option<f64>,
    /// Decoder merge period.
    #[arg(long)]
    g: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained model; without it a random workload is generated.
    #[arg(long, requires_all = ["store", "queries"])]
    model: Option<std::path::PathBuf>,
    /// Store precomputed with that model.
    #[arg(long, requires = "model")]
    store: Option<std::path::PathBuf>,
    /// Query file, one `<text>\t<id>,<id>,...` per line.
    #[arg(long, requires = "model")]
    queries: Option<std::path::PathBuf>,
    /// Raw corpus for the uncached reference path.
    #[arg(long, requires = "model")]
    corpus: Option<std::path::PathBuf>,
    /// Runtime ratios to sweep, comma-separated.
    #[arg(long, default_value = "0,0.1,0.2")]
    ratios: String,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Swap in a known-bad implementation to show the suites catch it.
    #[cfg(debug_assertions)]
    #[arg(long, value_parser = ["bit-order"])]
    inject_fault: Option<String>,
}

/// Why a command failed, which decides the exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] btr::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();
}

/// Honors `BTR_THREADS` as a cap on worker threads.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BTR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("BTR_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Precompute(a) => commands::precompute(a),
        Command::Compress(a) => commands::compress(a),
        Command::Stats(a) => commands::stats(a),
        Command::Query(a) => commands::query(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Bench(a) => commands::bench(a),
        Command::Selftest(a) => commands::selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(&cli);
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            log::error!("{e}");
            ExitCode::from(e.code())
        }
        Err(_) => {
            log::error!("internal error: a worker panicked");
            ExitCode::from(3)
        }
    }
}
