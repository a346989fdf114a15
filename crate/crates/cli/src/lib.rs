//! Experiment runner behind the `afmvc` binary.
//!
//! Every subcommand writes plain CSV/JSON into an output directory chosen by
//! `--out`, then `AFMVC_OUT`, then `./afmvc-out`.

use std::path::{Path, PathBuf};

use afmvc::trainer::TrainConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const TRAINING: i32 = 3;
    pub const BOUND: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(afmvc::Error),
    #[error("bound check failed: {0}")]
    Bound(afmvc::Error),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => exit::CONFIG,
            CliError::Training(_) => exit::TRAINING,
            CliError::Bound(_) => exit::BOUND,
        }
    }

    pub(crate) fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub(crate) fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "afmvc", version, about = "Adversarial fair multi-view clustering")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "AFMVC_OUT", default_value = "afmvc-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train R times with consecutive seeds and aggregate the metrics.
    Train(RunArgs),
    /// Score a cluster assignment file against a dataset.
    Evaluate(EvaluateArgs),
    /// Run the four loss combinations A–D with shared seeds.
    Ablate(RunArgs),
    /// Grid over λ_C × λ_F, one matrix CSV per metric.
    Sweep(SweepArgs),
    /// Sample joints near independence and compare I(Q;G) with the bound.
    BoundCheck(BoundArgs),
    /// Write a synthetic dataset with its manifest.
    SynthData(SynthArgs),
}

/// Training hyperparameters settable from the command line. Flags win over
/// the config file, which wins over built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub update_interval: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { config.$field = v; })*
            };
        }
        set!(lambda_c, lambda_f, epochs, update_interval, beta, batch_size, pretrain_epochs, lr, seed);
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training configuration (TOML); missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Number of runs, seeded seed..seed+R-1.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV with header `instance_index,cluster_id`.
    #[arg(long)]
    pub assignments: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// λ_C values; defaults to 1e-3, 1e-2, 1e-1, 1, 10.
    #[arg(long, value_delimiter = ',')]
    pub lambda_c_grid: Vec<f64>,
    /// λ_F values; defaults to 1e-3, 1e-2, 1e-1, 1, 10.
    #[arg(long, value_delimiter = ',')]
    pub lambda_f_grid: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct BoundArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05, 0.01])]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Number of clusters K.
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    /// Number of sensitive groups |G|.
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Separable Gaussian blobs seen through sigmoid and ReLU views.
    Blobs,
    /// Blobs whose binary group follows cluster parity with probability ρ.
    Biased,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Instances; 1000 for blobs, 2000 for the biased testbed.
    #[arg(long)]
    pub n: Option<usize>,
    /// Clusters; 4 for blobs, 2 for the biased testbed.
    #[arg(long)]
    pub k: Option<usize>,
    /// Base feature dimension; 6 for blobs, 4 for the biased testbed.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Distance of each blob center from the origin; 6 for blobs, 3 for the biased testbed.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    /// Leave the group bit out of the input features (biased kind only).
    #[arg(long)]
    pub no_sensitive_feature: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(args) => commands::train(args, &cli.out).map(|_| ()),
        Command::Evaluate(args) => commands::evaluate(args, &cli.out).map(|_| ()),
        Command::Ablate(args) => commands::ablate(args, &cli.out).map(|_| ()),
        Command::Sweep(args) => commands::sweep(args, &cli.out).map(|_| ()),
        Command::BoundCheck(args) => commands::bound_check(args, &cli.out).map(|_| ()),
        Command::SynthData(args) => commands::synth_data(args, &cli.out).map(|_| ()),
    }
}
