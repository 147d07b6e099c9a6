//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 I/O error,
//! 3 internal invariant violation.

mod commands;
pub mod config;
pub mod io;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{bundled_scenario, split_indices};
pub use report::{InstanceRecord, SelectionReport, SELECTION_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Validation(#[from] crate::Error),
    #[error("{}:{line}{}: {message}", file.display(), column.as_ref().map(|c| format!(" (column `{c}`)")).unwrap_or_default())]
    Parse {
        file: PathBuf,
        line: u64,
        column: Option<String>,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) | CliError::Parse { .. } => 1,
            CliError::Io { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "conflab",
    version,
    about = "Select AI-labeled instances whose labels can be trusted, with FDR control"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn per-class probabilities or logits into uncertainty scores.
    Score(ScoreArgs),
    /// Compute conformal p-values and select trusted test instances.
    Select(SelectArgs),
    /// Split one labeled file into calibration and test files.
    Split(SplitArgs),
    /// Run a Monte Carlo simulation scenario.
    Simulate(SimulateArgs),
    /// Bootstrap-tune lambda (Storey-BH) or k0 (Quantile-BH).
    Tune(TuneArgs),
    /// Score a selection report against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// CSV with `id` and either `prob_0..prob_{K-1}` or `logit_0..logit_{K-1}`.
    #[arg(long)]
    pub input: PathBuf,
    /// msp, energy or doctor-alpha.
    #[arg(long)]
    pub kind: String,
    /// Flip the sign of every score.
    #[arg(long)]
    pub negate_score: bool,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Labeled calibration CSV.
    #[arg(long, requires = "test", conflicts_with = "input")]
    pub calibration: Option<PathBuf>,
    /// Test CSV with `id` and `score`.
    #[arg(long, requires = "calibration")]
    pub test: Option<PathBuf>,
    /// A single labeled CSV to split with --split-fraction and --split-seed.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub split_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// JSON file with default settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target FDR level (default 0.1).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// conformal-labeling (default), bh, storey-bh or quantile-bh.
    #[arg(long)]
    pub procedure: Option<String>,
    /// Storey-BH lambda; bootstrap-tuned when omitted.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Quantile-BH rank; bootstrap-tuned when omitted.
    #[arg(long)]
    pub k0: Option<usize>,
    #[arg(long)]
    pub bootstrap_replicates: Option<usize>,
    /// Seed for the tie-break draws (default: $CONFLAB_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flip the sign of every score, for confidences where larger means surer.
    #[arg(long)]
    pub negate_score: bool,
    /// Regression mode: squared-error, absolute-error or zero-one.
    #[arg(long)]
    pub loss: Option<String>,
    /// Loss tolerance for regression mode.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Where to write the JSON report; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Where to write the selected ids as CSV.
    #[arg(long)]
    pub selected_ids: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Fraction of rows that go to the calibration file.
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub calibration_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON; missing fields take the built-in defaults.
    #[arg(long, conflicts_with = "scenario")]
    pub config: Option<PathBuf>,
    /// A bundled scenario: theorem1, small-n, procedures or null-uniformity.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// Flat CSV; stdout when neither output is given.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// CSV with a `p_value` column, or a selection report (`.json`).
    #[arg(long)]
    pub pvalues: PathBuf,
    /// storey or quantile.
    #[arg(long)]
    pub kind: String,
    /// Comma-separated grid; defaults to 0.1..0.9 or the decile ranks.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = crate::tuning::DEFAULT_BOOTSTRAP_REPLICATES)]
    pub replicates: usize,
    /// pFDR evaluation point; defaults to --alpha.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = config::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A report written by `select`.
    #[arg(long)]
    pub report: PathBuf,
    /// CSV keyed by `id` with `correct`, `label`+`predicted`, or `y`+`y_hat`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Loss for `y`/`y_hat` truth files.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Score(a) => commands::score(a),
        Command::Select(a) => commands::select(a),
        Command::Split(a) => commands::split(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Tune(a) => commands::tune(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}
