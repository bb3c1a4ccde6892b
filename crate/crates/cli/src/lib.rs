//! Command-line front end: train, encode, decode, eval, inspect, plus a
//! synthetic corpus writer and the 2-D toy bench.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 stream or
//! configuration mismatch.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flowmac_core::bitstream::StreamError;
use flowmac_core::CodecError;

mod commands;
mod plot;

pub use commands::{load_codec, AnyCodec};
pub use plot::{mel_difference_png, scatter_png};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "flowmac", version, about = "Mel codec with a flow-matching decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a synthetic corpus and write a checkpoint plus loss CSV.
    Train(TrainArgs),
    /// Encode a mono WAV file into a .fmac stream.
    Encode(EncodeArgs),
    /// Decode a .fmac stream to WAV.
    Decode(DecodeArgs),
    /// Round-trip every WAV in a directory and report LSD, rate, NFE and RTF.
    Eval(EvalArgs),
    /// Print the header, rate and code histogram of a .fmac stream.
    Inspect(InspectArgs),
    /// Write synthetic test signals as WAV files.
    Synth(SynthArgs),
    /// Train and sample the 2-D toy flow.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to write.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Quantizer stages to transmit; defaults to all.
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    /// Euler steps; defaults to the checkpoint's sampler setting.
    #[arg(long)]
    pub nfe_steps: Option<usize>,
    /// Guidance factor, clamped to [0, 2].
    #[arg(long)]
    pub cfg: Option<f64>,
    /// Evaluate only the conditional branch.
    #[arg(long)]
    pub no_cfg: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One conditional Euler step (1 NFE).
    #[arg(long)]
    pub single_step: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of mono WAV files.
    pub dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV report with one row per item and a final aggregate row.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stages: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Write a mel difference image per item into this directory.
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Compare each input with itself, skipping the codec.
    #[arg(long)]
    pub bypass: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(short, long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub items: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 24_000)]
    pub sample_rate: u32,
    /// Write a single sine at this frequency instead of the mixed corpus.
    #[arg(long)]
    pub tone: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub sampler_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write samples CSV, loss CSV and scatter PNG.
    #[arg(short, long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_MISMATCH,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        let code = match &e {
            CodecError::NonFinite(_) => EXIT_NUMERIC,
            CodecError::ConfigMismatch(_) | CodecError::Stream(_) => EXIT_MISMATCH,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        CliError::mismatch(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

/// Runs one command, writing its report to `out` and warnings to stderr.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a, out),
        Command::Encode(a) => commands::encode(&a, out),
        Command::Decode(a) => commands::decode(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Inspect(a) => commands::inspect(&a, out),
        Command::Synth(a) => commands::synth(&a, out),
        Command::Toy(a) => commands::toy(&a, out),
    }
}
