//! `dap-lab`: generate synthetic benchmarks, train with or without the prior
//! alignment loss, evaluate checkpoints and run parameter sweeps.
//!
//! Exit codes: 0 success, 2 usage error, 3 input or configuration error,
//! 4 numeric failure (a non-finite loss or parameter).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod manifest;
pub mod sweep;

pub use commands::{cmd_eval, cmd_gen, cmd_replay, cmd_train};
pub use sweep::cmd_sweep;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dap-lab", version, about = "Domain-agnostic prior experiments on synthetic two-domain scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a source/target benchmark bundle.
    Gen(GenArgs),
    /// Train one model on a bundle.
    Train(TrainArgs),
    /// Evaluate a student checkpoint and write feature diagnostics.
    Eval(EvalArgs),
    /// Run a grid of trainings over alpha values or prior kinds.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a run manifest and compare checksums.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value = "gap-default")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub n_source: usize,
    #[arg(long, default_value_t = 64)]
    pub n_target: usize,
    #[arg(long, default_value_t = 16)]
    pub n_test: usize,
    /// Side length of the square scenes.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Onehot,
    Random,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Bilinear,
    Nearest,
}

/// Training flags shared by `train` and `sweep`. Flags override `--config`.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// `key = value` file with any training config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub interp: Option<InterpArg>,
    /// Train the baseline without the prior alignment loss.
    #[arg(long)]
    pub no_dap: bool,
    /// Adaptation steps after the warm-up.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Source-only warm-up steps before self-training starts.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Word-vector file for `--prior file`.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub prior: Option<PriorArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Do not score pseudo labels against the bundle's sealed labels.
    #[arg(long)]
    pub no_audit: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    TargetTest,
    Source,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// A `student.ckpt` written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "target-test")]
    pub split: SplitArg,
    /// Monte-Carlo draws per Gaussian for the overlap statistic.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',', conflicts_with = "priors")]
    pub alphas: Vec<f64>,
    /// Comma-separated prior kinds.
    #[arg(long, value_delimiter = ',', value_enum)]
    pub priors: Vec<PriorArg>,
    /// Number of seeds per cell (seeds 0..n).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for an error chain: numeric failures map to 4, the rest to 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err.chain().any(|e| e.downcast_ref::<dap_lab::Error>().is_some_and(dap_lab::Error::is_numeric));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a, &recorded).map(|_| ()),
        Command::Train(a) => cmd_train(&a, &recorded).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, &recorded).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a, &recorded).map(|_| ()),
        Command::Replay(a) => cmd_replay(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
