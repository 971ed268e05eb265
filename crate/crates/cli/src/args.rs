use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "deepshore", version, about = "SHORE fitting, FOD learning and phantom experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a multi-tensor phantom dataset.
    Phantom(PhantomArgs),
    /// Fit SHORE coefficients to every signal of a dataset.
    FitShore(FitShoreArgs),
    /// Optimize the SHORE scale on a dataset.
    OptimizeZeta(OptimizeZetaArgs),
    /// Convert the ground-truth FODs of a dataset to SHORE at b = 2000.
    FodToShore(FodToShoreArgs),
    /// Train the network on paired coefficient files.
    Train(TrainArgs),
    /// Apply a trained network.
    Predict(PredictArgs),
    /// Score predicted FODs against ground truth.
    Evaluate(EvaluateArgs),
    /// Block cross-validated subcase experiment.
    Crossval(CrossvalArgs),
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config document with optional "phantom" and "pipeline" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated shell b-values used as input.
    #[arg(long, value_delimiter = ',')]
    pub shells: Option<Vec<f64>>,
    /// Shell removed from the input mask (0 disables withholding).
    #[arg(long)]
    pub withhold_b: Option<f64>,
    #[arg(long)]
    pub radial_order: Option<usize>,
    #[arg(long)]
    pub lambda_n: Option<f64>,
    #[arg(long)]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub nonneg_epsilon: Option<f64>,
    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output container.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub voxels: Option<usize>,
    #[arg(long)]
    pub rotations: Option<usize>,
    /// Signal-to-noise ratio; "inf" for noiseless data.
    #[arg(long)]
    pub snr: Option<String>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Also write FSL bval/bvec tables.
    #[arg(long)]
    pub bval: Option<PathBuf>,
    #[arg(long)]
    pub bvec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitShoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Defaults to median(b)/8 of the masked scheme.
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Fit the raw attenuation instead of its clamped logarithm.
    #[arg(long)]
    pub linear: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeZetaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub zeta0: Option<f64>,
    /// Rows used for the objective, evenly subsampled.
    #[arg(long)]
    pub max_rows: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FodToShoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub zeta: f64,
    /// Convert the FOD itself instead of its clamped logarithm.
    #[arg(long)]
    pub linear: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    /// Hold out one block fold for best-epoch selection.
    #[arg(long)]
    pub validate: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predicted (log-space) coefficients.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset holding the ground-truth FODs.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// One or more comma-separated subcases.
    #[arg(long, value_delimiter = ',')]
    pub subcase: Option<Vec<String>>,
    #[arg(long)]
    pub eval_folds: Option<usize>,
    #[arg(long)]
    pub train_folds: Option<usize>,
    /// Disable the inner validation fold.
    #[arg(long)]
    pub no_nested: bool,
}
