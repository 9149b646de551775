mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Outcome, UsageError};

/// Focus quality scoring for microscopy images and whole slides.
#[derive(Debug, Parser)]
#[command(name = "fqpath", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a kernel from the optics model and save it as JSON.
    SynthKernel(SynthKernelArgs),
    /// Score image patches and write one CSV row per image.
    Score(ScoreArgs),
    /// Tile a slide, score every tissue tile and emit the heatmap outputs.
    Heatmap(HeatmapArgs),
    /// Fit the score projection from training z-profiles.
    FitProjection(FitProjectionArgs),
    /// Correlate predicted scores with ground-truth z levels.
    Eval(EvalArgs),
    /// Find the acceptance threshold that best matches subjective ratios.
    Sweep(SweepArgs),
    /// Write a seeded synthetic blur ladder with labels.
    MakeLadder(MakeLadderArgs),
    /// Time single-threaded patch scoring.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct OpticsArgs {
    /// Numerical aperture.
    #[arg(long)]
    pub na: Option<f64>,
    /// Wavelength in meters.
    #[arg(long)]
    pub wavelength_m: Option<f64>,
    #[arg(long)]
    pub refractive_index: Option<f64>,
    /// Sample spacing in meters.
    #[arg(long)]
    pub pixel_pitch_m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthKernelArgs {
    #[command(flatten)]
    pub optics: OpticsArgs,
    /// Defocus (optical units) of the PSF the kernel inverts.
    #[arg(long)]
    pub z_star: Option<f64>,
    /// Number of derivative orders combined.
    #[arg(long)]
    pub orders: Option<usize>,
    /// Derivative filter cutoff in rad/sample.
    #[arg(long)]
    pub cutoff: Option<f64>,
    /// Filter half length.
    #[arg(long)]
    pub half_length: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Even moment order of the pooled features.
    #[arg(long)]
    pub moment_order: Option<u32>,
    /// Upper quantile used for the retention rule.
    #[arg(long)]
    pub percentile: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Images or directories of images (PNG or TIFF).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    pub image: PathBuf,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub projection: Option<PathBuf>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Acceptance ratio needed to pass.
    #[arg(long)]
    pub pass_ratio: Option<f64>,
    /// Projected score rendered as fully blurred.
    #[arg(long)]
    pub z_cap: Option<f64>,
    /// Tissue rule: largest mean intensity.
    #[arg(long)]
    pub max_mean: Option<f64>,
    /// Tissue rule: smallest standard deviation.
    #[arg(long)]
    pub min_std: Option<f64>,
    #[arg(long)]
    pub out_png: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub out_curve: Option<PathBuf>,
    /// Pixels per tile in the rendered heatmap.
    #[arg(long)]
    pub block: Option<usize>,
    /// Worker threads for tile scoring.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit with status 3 when the slide fails.
    #[arg(long)]
    pub gate: bool,
}

#[derive(Debug, Args)]
pub struct FitProjectionArgs {
    /// CSV with columns profile_id, z, raw_score.
    #[arg(long)]
    pub profiles: PathBuf,
    /// Fit window as lo:hi in z levels.
    #[arg(long, default_value = "-3:3", allow_hyphen_values = true)]
    pub window: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV as written by `score`.
    #[arg(long)]
    pub pred: PathBuf,
    /// CSV with columns path, z.
    #[arg(long)]
    pub truth: PathBuf,
    /// Prediction column to evaluate.
    #[arg(long, default_value = "raw_score")]
    pub column: String,
    /// Map predictions through a fitted logistic for PLCC and RMSE.
    #[arg(long)]
    pub logistic: bool,
    /// Compare against signed z instead of |z|.
    #[arg(long)]
    pub signed: bool,
    /// JSON destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory of per-slide tile CSVs named <slide_id>.csv.
    #[arg(long)]
    pub slides: PathBuf,
    /// CSV with columns slide_id, acceptance_ratio.
    #[arg(long)]
    pub subjective: PathBuf,
    /// Threshold grid as lo:hi:step.
    #[arg(long, default_value = "0.5:4:0.01")]
    pub grid: String,
    /// CSV destination for the threshold/PLCC curve.
    #[arg(long)]
    pub out_curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeLadderArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Inclusive range a..b or a comma list.
    #[arg(long, default_value = "0..8")]
    pub levels: String,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Blur model: psf or gaussian.
    #[arg(long, default_value = "psf")]
    pub blur: String,
    /// Gaussian sigma per level in pixels.
    #[arg(long, default_value_t = 0.5)]
    pub sigma_per_level: f64,
    #[command(flatten)]
    pub optics: OpticsArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Kernel JSON; synthesized from the defaults when omitted.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::GateFailed) => ExitCode::from(3),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
