//! `plants` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plants_core::PlantsError;

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "plants", version, about = "Periodicity-aware self-supervised time-series representations")]
pub struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for similarity and tensor kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train encoders on a dataset and write a run directory.
    Train(TrainArgs),
    /// Encode a dataset with a trained checkpoint.
    Encode(EncodeArgs),
    /// Detect dominant periods and print their windows.
    Periods(PeriodsArgs),
    /// Fit a probe on frozen representations.
    Probe(ProbeArgs),
    /// Masked-input anomaly scores per timestep.
    Anomaly(AnomalyArgs),
    /// Time MXCorr against DTW pairwise similarity structures.
    Bench(BenchArgs),
    /// Generate a labelled hidden-Markov dataset.
    Synth(SynthArgs),
    /// Project one instance's representation onto its top principal components.
    Traj(TrajArgs),
    /// Grid over alpha and lambda scored by a linear state probe.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of detected periods.
    #[arg(long, conflicts_with = "windows")]
    pub k: Option<usize>,
    /// Explicit window sizes, comma separated.
    #[arg(long)]
    pub windows: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset (`.csv` or binary).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, logs and manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-timestep `N × L × D` output; the max-pooled `N × 1 × D` block is
    /// written next to it with extension `.inst`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PeriodsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKindArg {
    Linear,
    Knn,
    Forecast,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe training split (the only input for `forecast`).
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out split for classification probes.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "linear")]
    pub kind: ProbeKindArg,
    /// Pooling window for classification probes.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    /// Forecast horizons, comma separated.
    #[arg(long, default_value = "8,16,32")]
    pub horizons: String,
    /// Raw-input baseline window for forecasting.
    #[arg(long, default_value_t = 16)]
    pub baseline_window: usize,
    #[arg(long, default_value_t = plants_core::eval::DEFAULT_RIDGE)]
    pub ridge: f64,
    /// Report CSV path (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnomalyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score a single instance (all instances if absent).
    #[arg(long)]
    pub instance: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Mxcorr,
    Dtw,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "len", default_value_t = 256)]
    pub len: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long = "len", default_value_t = 400)]
    pub len: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Steps between state resamples.
    #[arg(long, default_value_t = 50)]
    pub dwell: usize,
    /// Output dataset (`.csv` or binary).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub instance: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Labelled dataset; the first 75% of instances fit the probe.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0,0.5,0.9")]
    pub alphas: String,
    #[arg(long, default_value = "0.5,1")]
    pub lambdas: String,
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_DATA,
            message: msg.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PlantsError> for CliError {
    fn from(e: PlantsError) -> Self {
        let code = match e {
            PlantsError::NonFinite(_) | PlantsError::Domain { .. } => EXIT_NUMERIC,
            PlantsError::Invalid(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| commands::dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::io::stderr().flush();
            e.code
        }
    }
}
