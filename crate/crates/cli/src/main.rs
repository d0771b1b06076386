mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::TrainFlags;

#[derive(Parser)]
#[command(name = "mmoe", version, about = "Train, evaluate and analyze toy mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted override such as `train.optimizer.lr_peak=0.01`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under flat or layer-group expert counts.
    Eval {
        checkpoint: PathBuf,
        /// Same expert count in every layer; repeatable.
        #[arg(long)]
        k: Vec<usize>,
        /// Per-group counts such as `3-3-2-2`; repeatable.
        #[arg(long)]
        pattern: Vec<String>,
        /// Every flat count in a range, written `1..K` (inclusive).
        #[arg(long)]
        sweep: Option<String>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "eval_out")]
        output_dir: PathBuf,
    },
    /// Router diagnostics.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Write a sample of a synthetic task as text.
    GenData {
        /// Run config whose `task` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        tokens: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write token ids instead of rendered symbols.
        #[arg(long)]
        ids: bool,
        #[arg(long, default_value = "data_out")]
        output_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Focused Spearman heatmap of router logits at k_large against each smaller k.
    Spearman {
        checkpoint: PathBuf,
        /// Reference expert count; defaults to the training k_max (or 6), capped at N.
        #[arg(long)]
        k_large: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "analysis_out")]
        output_dir: PathBuf,
    },
    /// Mean off-diagonal gate similarity per layer, from weights alone.
    Mods {
        checkpoint: PathBuf,
        #[arg(long, default_value = "analysis_out")]
        output_dir: PathBuf,
    },
}

#[derive(Clone, Debug, clap::Args, serde::Serialize)]
pub struct DataArgs {
    /// Evaluation tokens.
    #[arg(long, default_value_t = 8192)]
    pub tokens: usize,
    /// Selects the evaluation stream; the task's eval seed keys it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequence length; defaults to the training value stored in the checkpoint.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Task JSON replacing the one stored in the checkpoint.
    #[arg(long)]
    pub task: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Eval,
}

/// How a command failed, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Rejected configuration or arguments (exit 2).
    Invalid(String),
    /// Training diverged (exit 3).
    NonFinite(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::NonFinite(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid configuration: {m}"),
            Failure::NonFinite(m) => write!(f, "training aborted: {m}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<mmoe::Error> for Failure {
    fn from(e: mmoe::Error) -> Self {
        use mmoe::Error as E;
        match e {
            E::Config(_) | E::InfeasibleBudget { .. } => Failure::Invalid(e.to_string()),
            E::NonFiniteLoss { .. } | E::NonFinite { .. } => Failure::NonFinite(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("MMOE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Invalid(format!("MMOE_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Other(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Train {
            config,
            mut overrides,
            flags,
            output_dir,
        } => {
            overrides.extend(flags.as_overrides());
            if let Some(dir) = output_dir {
                overrides.push(format!("output_dir={}", dir.display()));
            }
            commands::train(config.as_deref(), &overrides)
        }
        Command::Eval {
            checkpoint,
            k,
            pattern,
            sweep,
            data,
            output_dir,
        } => commands::eval(&checkpoint, &k, &pattern, sweep.as_deref(), &data, &output_dir),
        Command::Analyze { what } => match what {
            Analysis::Spearman {
                checkpoint,
                k_large,
                data,
                output_dir,
            } => commands::analyze_spearman(&checkpoint, k_large, &data, &output_dir),
            Analysis::Mods { checkpoint, output_dir } => commands::analyze_mods(&checkpoint, &output_dir),
        },
        Command::GenData {
            config,
            overrides,
            tokens,
            split,
            seed,
            ids,
            output_dir,
        } => commands::gen_data(config.as_deref(), &overrides, tokens, split, seed, ids, &output_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
