//! `sedformer` command-line tool: dataset preparation, training, evaluation,
//! encoder visualization, energy reports, and hyperparameter sweeps.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "sedformer", version, about = "Event-synchronous spiking forecaster for irregular multivariate time series")]
struct Cli {
    /// JSON file overriding the default settings; flags override it in turn.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root that relative output directories are resolved against.
    #[arg(long, global = true, env = "SEDFORMER_OUT", default_value = ".", value_name = "DIR")]
    out_root: PathBuf,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, sparsify, and window a corpus (or the synthetic suite).
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Score a checkpoint and the naive baselines.
    Eval(EvalArgs),
    /// Spike rasters of the three encoders on the two-phase dataset.
    Viz(VizArgs),
    /// Operation counts and energy estimate of a checkpoint.
    Energy(EnergyArgs),
    /// One-at-a-time sweep over tau, stride, blocks, and dim.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Sinusoid,
    Pulse,
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("rate must lie in [0, 1], got {r}"))
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Wide CSV corpus; the synthetic suite is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Consecutive corpus rows grouped into one multivariate series.
    #[arg(long, default_value_t = 4)]
    group: usize,
    /// Keep only the first N corpus rows.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum)]
    suite: Option<Suite>,
    /// Number of synthetic series.
    #[arg(long)]
    series: Option<usize>,
    /// MCAR drop probability.
    #[arg(long, value_parser = parse_rate)]
    rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window start spacing in days.
    #[arg(long)]
    window_stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Initial membrane time constant of encoder and attention filters.
    #[arg(long)]
    tau: Option<f64>,
    /// Event pooling stride.
    #[arg(long)]
    stride: Option<usize>,
    /// Number of backbone blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Token width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args, Default)]
struct TrainingArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Shuffling seed; also the parameter initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset; repeat once per sparsifying rate.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Splits to score.
    #[arg(long, default_values_t = ["test".to_string()])]
    split: Vec<String>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    e_acc: Option<f64>,
    #[arg(long)]
    e_cmp: Option<f64>,
    #[arg(long)]
    e_rd: Option<f64>,
    #[arg(long)]
    e_wr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Parameters to sweep (tau, stride, blocks, dim); all when absent.
    #[arg(long)]
    param: Vec<String>,
    /// Add a wall-clock column to the output.
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    out: PathBuf,
}

fn resolve(root: &Path, dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        root.join(dir)
    }
}

/// 2 for bad input (flags, files, data), 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sedformer::Error>() {
            return if e.is_user_error() || matches!(e, sedformer::Error::Json(_)) { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
