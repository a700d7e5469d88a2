mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nnn_core::NnnError;

#[derive(Parser)]
#[command(name = "nnn", version, about = "Neural marketing-mix modeling toolkit")]
struct Cli {
    /// Root under which new run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Variance {
    High,
    Low,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    ZeroOut,
    Ar,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// `key = value` config file (includes allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra assignments applied after the file, e.g. `--set "Training Steps=2k"`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides every seed; `NNN_SEED` does the same.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        #[arg(long, value_enum, default_value = "high")]
        variance: Variance,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        geos: Option<usize>,
        #[arg(long)]
        weeks: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train one model and evaluate it.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per L1 coefficient and keep the best by validation MAPE.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated λ grid (defaults to the config's `lambdas`).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Ground truth JSON from `simulate`, for attribution error.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Recompute metrics for a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Attribute sales to channels by zero-out or AR unrolling.
    Attribute {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "zero-out")]
        method: MethodArg,
        #[arg(long, value_delimiter = ',')]
        channels: Vec<String>,
        /// Last week (exclusive) of the attribution period; the training window by default.
        #[arg(long)]
        period_end: Option<usize>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Zero a channel over a window and compare standard against unrolled inference.
    Pause {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "youtube")]
        channel: String,
        #[arg(long, default_value_t = 52)]
        start: usize,
        #[arg(long, default_value_t = 20)]
        len: usize,
    },
    /// Score embeddings and export a 2D landscape.
    Probe {
        #[arg(long)]
        run: PathBuf,
        /// Channel whose slot is probed (defaults to the config's `probe_channel`).
        #[arg(long)]
        channel: Option<String>,
        /// CSV of `label,v0,v1,...`; rows labelled `best` and `worst` seed the landscape.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Ground truth JSON whose `e_best`/`e_worst` seed the landscape.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Dump learned channel and temporal attention weights.
    InspectAttention {
        #[arg(long)]
        run: PathBuf,
        /// Number of weeks to lay out the temporal weights over.
        #[arg(long)]
        weeks: Option<usize>,
    },
}

/// Distinct exit status per failure category.
fn exit_code(e: &NnnError) -> u8 {
    match e {
        NnnError::Config(_) => 3,
        NnnError::UnknownChannel(_) => 4,
        NnnError::Shape(_) => 5,
        NnnError::Io(_) => 6,
        NnnError::Format(_) | NnnError::Version { .. } | NnnError::Truncated(_) | NnnError::Json(_) => 7,
        NnnError::Empty(_) => 8,
        NnnError::Divergence { .. } => 9,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = cli.out;
    let result = match cli.command {
        Command::Simulate { variance, seed, geos, weeks, dim } => commands::simulate(&out, variance, seed, geos, weeks, dim),
        Command::Train { dataset, cfg } => commands::train(&out, &dataset, &cfg),
        Command::Sweep {
            dataset,
            cfg,
            lambdas,
            workers,
            truth,
        } => commands::sweep(&out, &dataset, &cfg, &lambdas, workers, truth.as_deref()),
        Command::Eval { run } => commands::eval(&out, &run),
        Command::Attribute {
            run,
            method,
            channels,
            period_end,
            truth,
        } => commands::attribute(&out, &run, method, &channels, period_end, truth.as_deref()),
        Command::Pause { run, channel, start, len } => commands::pause(&out, &run, &channel, start, len),
        Command::Probe { run, channel, embeddings, truth } => commands::probe(&out, &run, channel.as_deref(), embeddings.as_deref(), truth.as_deref()),
        Command::InspectAttention { run, weeks } => commands::inspect_attention(&out, &run, weeks),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
