//! The `mvdg` command-line driver: config parsing, experiment orchestration
//! and artifact emission.
//!
//! Every subcommand computes all of its artifacts in memory before writing
//! any of them under `--out`, so a failed run leaves no partial output.
//! Artifacts are JSON (records, checkpoints, analyses) or CSV (datasets,
//! report tables), each carrying a `format_version`.

mod commands;
mod config;
mod records;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::BnPolicy;
use crate::episodic::SamplingStrategy;
use crate::meta::Method;

pub use commands::execute;
pub use config::{load_config, AnalysisConfig, BoundSettings, ExperimentConfig, SuiteSource, CONFIG_FORMAT_VERSION};
pub use records::{
    aggregate_metrics, write_report_csv, MeanStd, MetricsRecord, ReportRow, TrainRecord, RECORD_FORMAT_VERSION,
};

#[derive(Debug, Parser)]
#[command(
    name = "mvdg",
    version,
    about = "Multi-view regularized meta-learning for domain generalization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the experiment subcommands. Flags override the config
/// file; for commands that read a checkpoint, the checkpoint's seed, method
/// and target sit between the two.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON). Missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment seed; drives data, training, views and perturbations.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training method: erm, reptile or mvrml.
    #[arg(long)]
    pub method: Option<Method>,
    /// Index of the held-out target domain.
    #[arg(long)]
    pub target_index: Option<usize>,
    /// Number of views for multi-view prediction.
    #[arg(long)]
    pub views: Option<usize>,
    /// Task sampling strategy: s1, s2 or s3.
    #[arg(long)]
    pub strategy: Option<SamplingStrategy>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured suite as CSV (`suite.csv`).
    GenData(CommonArgs),
    /// Train one method on one held-out target (`checkpoint.json`,
    /// `train_report.json`, plus any analyses enabled in the config).
    Train(CommonArgs),
    /// Clean target metrics of a checkpoint (`metrics.json`).
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Clean, multi-view and prediction-change metrics (`metrics.json`).
    MvpEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Transformed copies per sample for the prediction change rate.
        #[arg(long)]
        pcr_trials: Option<usize>,
    },
    /// Sharpness of a checkpoint on its target domain (`sharpness.json`).
    Sharpness {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Target loss over the plane through three checkpoints (`surface.json`).
    Surface {
        #[command(flatten)]
        common: CommonArgs,
        /// Three checkpoints of one architecture; the first is the origin.
        #[arg(long, num_args = 3, required = true)]
        anchors: Vec<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_parser = parse_bn_policy)]
        bn_policy: Option<BnPolicy>,
    },
    /// Evaluate the generalization bound (`bound.json`). Risk and divergence
    /// come from flags, or are estimated from a checkpoint.
    Bound {
        #[command(flatten)]
        common: CommonArgs,
        /// Model whose source risk and divergence are estimated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Mean source loss; overrides the estimate.
        #[arg(long)]
        empirical_risk: Option<f64>,
        /// Largest source-to-target divergence; overrides the estimate.
        #[arg(long)]
        sup_divergence: Option<f64>,
        /// Stability constant for trajectory sequences.
        #[arg(long)]
        beta1: Option<f64>,
        /// Stability constant for tasks within a sequence.
        #[arg(long)]
        beta2: Option<f64>,
        /// Number of sequences; defaults to the count drawn in training.
        #[arg(long)]
        n_sequences: Option<u64>,
        /// Failure probability, in (0, 1).
        #[arg(long)]
        delta: Option<f64>,
        /// Upper bound on the loss.
        #[arg(long)]
        loss_bound_m: Option<f64>,
    },
    /// Aggregate metrics records into `report.csv` (mean and std per method
    /// and target). Directories are searched for `metrics.json` files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_bn_policy(s: &str) -> std::result::Result<BnPolicy, String> {
    match s {
        "interpolate" => Ok(BnPolicy::Interpolate),
        "reestimate_per_point" | "reestimate-per-point" => Ok(BnPolicy::ReestimatePerPoint),
        other => Err(format!("unknown policy `{other}` (interpolate, reestimate_per_point)")),
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 2 on usage errors, 1 on failures.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(written) => {
            for p in written {
                log::info!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                crate::Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}
