//! `rcp1`: calibrate, apply and audit single-sample robust conformal prediction.

mod commands;

use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "rcp1", version, about = "Single-sample robust conformal prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the certified lower and upper bounds for a clean probability.
    Certify(CertifyArgs),
    /// Calibrate a threshold on a labelled score file and write an artifact.
    Calibrate(CalibrateArgs),
    /// Apply a calibration artifact to a score file.
    Predict(PredictArgs),
    /// Coverage and size metrics of predicted sets.
    Evaluate(EvaluateArgs),
    /// Conformal risk control (plain and robust) on pixel-score images.
    Risk(RiskArgs),
    /// Monte Carlo coverage experiment on half-space data.
    Simulate(SimulateArgs),
}

/// Smoothing scheme and threat ball.
#[derive(Debug, Args, Clone)]
pub struct SmoothingArgs {
    /// gaussian, laplace or uniform.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Gaussian standard deviation (or the variance-matched width for uniform).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Laplace scale.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Uniform half-width.
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Read --sigma as a standard deviation for uniform noise.
    #[arg(long)]
    pub sigma_matched: bool,
    /// l1 or l2.
    #[arg(long, default_value = "l2")]
    pub norm: String,
    /// Threat radius.
    #[arg(long = "r")]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub beta: f64,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Labelled score file (csv or tsv) computed on one noisy copy per input.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    /// tps, aps or logit.
    #[arg(long, default_value = "tps")]
    pub score_kind: String,
    #[arg(long)]
    pub aps_seed: Option<u64>,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[arg(long, default_value_t = rcp1::DEFAULT_SEED)]
    pub seed: u64,
    /// Artifact path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Output of `predict`.
    #[arg(long)]
    pub sets: PathBuf,
    /// Labelled score file the sets were predicted for.
    #[arg(long)]
    pub scores: PathBuf,
    /// Size cut-offs k for prop_le_k and cov_le_k.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub thresholds: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append a row to an existing metrics file with the same columns.
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct RiskArgs {
    /// File of `scores.csv,truth.csv` lines, relative to its own directory.
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Generate this many synthetic 16x16 images instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub n_cal: usize,
    #[arg(long, default_value_t = 1)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    #[arg(long = "r", default_value_t = 0.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 512)]
    pub grid_points: usize,
    #[arg(long, default_value_t = rcp1::DEFAULT_SEED)]
    pub seed: u64,
    /// Write robust masks for the test images of the first split here.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat key=value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "k")]
    pub n_labels: Option<usize>,
    #[arg(long)]
    pub n_cal: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long = "r")]
    pub radius: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma_data: Option<f64>,
    #[arg(long)]
    pub offset_spacing: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub append: bool,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RCP1_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("RCP1_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Certify(a) => commands::certify(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Risk(a) => commands::risk(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(4),
    }
}
