//! Command-line front end for the cross-layer navigation CNN.
//!
//! Every subcommand writes into its `--out` directory only and appends one
//! line to `manifest.jsonl` there.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or file-format failure |
//! | 2 | invalid flags or configuration |
//! | 3 | checkpoint does not fit the model, or has no attention to show |
//! | 4 | training diverged (non-finite value) |
//! | 5 | gradient check above threshold |

pub mod commands;
pub mod manifest;
pub mod maps;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cnnav::trainer::Schedule;
use cnnav::Variant;

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Environment variable capping the number of concurrent ablation runs.
pub const THREADS_ENV: &str = "CNNAV_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cnnav", version, about = "Train and inspect cross-layer navigation CNNs on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train all four variants over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on the micro model.
    Gradcheck(GradcheckArgs),
    /// Export attention masks and feature energy maps as PGM.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Motif side; defaults to size / 8.
    #[arg(long)]
    pub motif: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr_backbone: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr_other: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub wd: f64,
    /// constant or cosine.
    #[arg(long, default_value = "constant", value_parser = parse_schedule)]
    pub schedule: Schedule,
    /// Write 0 in the wall_ms column so metrics are byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected variant; the checkpoint's own variant is used when omitted.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// train or test.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Variant to check; all four when omitted.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Coordinates sampled per variant.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = cnnav::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PPM images, all of one size.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: cnnav::Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.parse().map_err(|e: cnnav::Error| e.to_string())
}

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cnnav::Error> for Failure {
    fn from(e: cnnav::Error) -> Self {
        use cnnav::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidHyperparameter { .. } => EXIT_USAGE,
            E::CheckpointMismatch(_) | E::MissingParameter(_) => EXIT_CHECKPOINT,
            E::NonFinite(_) => EXIT_NON_FINITE,
            _ => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Visualize(a) => commands::visualize(a),
    }
}

/// Ablation parallelism from the environment, default 1.
pub fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure::new(EXIT_USAGE, format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
    }
}
