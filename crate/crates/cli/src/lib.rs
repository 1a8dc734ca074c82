//! The `attend` command line: dataset generation, training, evaluation,
//! detection, prediction, index fitting, the live service and offline
//! report tooling.

mod commands;
pub mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub(crate) fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "attend", version, about = "Learner attentiveness engine: datasets, models, index and live analytics")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled face dataset with the reference class skew.
    SynthData(SynthArgs),
    /// Train the four-branch affect model.
    Train(TrainArgs),
    /// Print per-state accuracy of a trained model on a dataset split.
    Evaluate(EvaluateArgs),
    /// List (and optionally draw) face boxes found in an image.
    Detect(DetectArgs),
    /// Print the probability matrix, levels, intensities and attentiveness index.
    Predict(PredictArgs),
    /// Fit attentiveness index weights from an annotation CSV.
    FitIndex(FitIndexArgs),
    /// Run the live analytics service.
    Serve(ServeArgs),
    /// Summarise lecture reports and derive cross-lecture recommendations.
    Report(ReportArgs),
    /// Rebuild a lecture report from an event log.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Focal,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    GroundTruth,
    Predicted,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    /// Validation samples.
    #[arg(long, default_value_t = 400)]
    pub val: usize,
    /// Test samples.
    #[arg(long, default_value_t = 400)]
    pub test: usize,
    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    /// Run batch loops on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by synth-data.
    #[arg(long, default_value = "synthetic")]
    pub data: PathBuf,
    /// Weights file; the history CSV and model card are written next to it.
    #[arg(long, default_value = "model.bin")]
    pub out: PathBuf,
    /// Maximum epochs.
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation-loss improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Minimum validation-loss decrease that counts as improvement.
    #[arg(long, default_value_t = 0.0)]
    pub min_delta: f64,
    /// Loss function.
    #[arg(long, value_enum, default_value_t = LossKind::Focal)]
    pub loss: LossKind,
    /// Focusing parameter of the focal loss.
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Stop once every head reaches this validation accuracy (default: off).
    #[arg(long)]
    pub stop_at_accuracy: Option<f64>,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Weights file written by train.
    #[arg(long, default_value = "model.bin")]
    pub model: PathBuf,
    /// Dataset directory written by synth-data.
    #[arg(long, default_value = "synthetic")]
    pub data: PathBuf,
    /// Split to evaluate: train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// Haar cascade XML (OpenCV legacy format).
    #[arg(long, default_value = "haarcascade_frontalface_default.xml")]
    pub cascade: PathBuf,
    /// Scale step between detection passes.
    #[arg(long, default_value_t = 1.1)]
    pub scale_factor: f64,
    /// Raw hits a group needs to count as a face.
    #[arg(long, default_value_t = 3)]
    pub min_neighbors: usize,
    /// Smallest window side in pixels.
    #[arg(long, default_value_t = 24)]
    pub min_size: usize,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// PNG or Netpbm image.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Write a PGM copy of the image with the boxes outlined.
    #[arg(long)]
    pub draw: Option<PathBuf>,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// JSON 4x4 probability matrix (rows: boredom, engagement, confusion, frustration).
    #[arg(long, conflicts_with = "image")]
    pub probs: Option<PathBuf>,
    /// PNG or Netpbm image to face-gate and classify.
    #[arg(long, requires = "model")]
    pub image: Option<PathBuf>,
    /// Weights file for image prediction.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Index weights JSON written by fit-index (default: built-in weights).
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitIndexArgs {
    /// CSV: id, four intensities, then one or more rater scores.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Whether the intensities are ground truth or model predictions.
    #[arg(long, value_enum, default_value_t = SourceKind::GroundTruth)]
    pub source: SourceKind,
    /// Write the fitted weights and diagnostics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML or JSON service config; ATTEND_* variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bind address (overrides config).
    #[arg(long)]
    pub host: Option<String>,
    /// Port (overrides config).
    #[arg(long)]
    pub port: Option<u16>,
    /// Data directory for logs and reports (overrides config).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Weights file enabling frame uploads (overrides config).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Haar cascade enabling frame uploads (overrides config).
    #[arg(long)]
    pub cascade: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files or session directories, in lecture order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Session directory or NDJSON event log.
    pub log: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Session title when no session record sits next to the log.
    #[arg(long, default_value = "")]
    pub title: String,
    /// Creation time in ms when no session record sits next to the log.
    #[arg(long, default_value_t = 0)]
    pub created_at_ms: u64,
    /// Initial disengagement threshold when no session record sits next to the log.
    #[arg(long, default_value_t = 0.40)]
    pub threshold: f64,
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .try_init();
    match commands::run(&cli) {
        Ok(out) => {
            use std::io::Write;
            let _ = writeln!(std::io::stdout().lock(), "{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs a parsed command and returns what it would print.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    commands::run(cli)
}
