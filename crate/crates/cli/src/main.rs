//! `wadenet`: synthesize data, preprocess, train, evaluate, count
//! parameters and check gradients. Machine-readable results go to
//! stdout, diagnostics to stderr.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wadenet::datapipe::Split;

#[derive(Parser, Debug)]
#[command(
    name = "wadenet",
    version,
    about = "Wavelet-decomposition CNN for raw-waveform speech classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic band-limited sinusoid corpus and its manifest.
    Synth(SynthArgs),
    /// Split a manifest and write the windowed cache.
    Preprocess(PreprocessArgs),
    /// Train a model; writes metrics.jsonl and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-layer parameter table of a configuration.
    Params(ParamsArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub clips: usize,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 10.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Window length in samples; defaults to the config's window_len.
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Record measured epoch durations in the metrics (breaks
    /// byte-for-byte reproducibility of metrics.jsonl).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split-annotated manifest, as written by `train` or `preprocess`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run config; its model section must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score majority votes per clip instead of single windows.
    #[arg(long)]
    pub clip_vote: bool,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Class count for the reference config when no file is given.
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Corrupts one op's backward pass (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wadenet: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
