//! `rhvae`: train, evaluate and inspect Riemannian Hamiltonian VAEs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing checkpoint at {0}; run `rhvae train` with the same config first")]
    MissingCheckpoint(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] rhvae::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 configuration, 3 files and checkpoints, 4 data, 5 numerics.
    pub fn exit_code(&self) -> u8 {
        use rhvae::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::MissingCheckpoint(_) | Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::Config(_) | E::Unsupported(_) => 2,
                E::Io { .. } | E::Checkpoint(_) => 3,
                E::Data(_) | E::Format(_) => 4,
                E::Divergence { .. } | E::Training { .. } | E::NonFinite(_) | E::Autodiff(_) => 5,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rhvae", version, about = "Riemannian Hamiltonian VAEs: training, evaluation and latent geometry")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dot-path, e.g. `--set flow.n_lf=3`.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `--set output=DIR`).
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Generate the circles-and-rings dataset as IDX files.
    MakeShapes,
    /// Train a model and write its checkpoint and history.
    Train,
    /// Importance-sampled log-likelihood and reconstruction error.
    Eval,
    /// Decode affine and geodesic latent interpolations.
    Interpolate,
    /// Volume-element, anisotropy and distance maps of the latent metric.
    MetricMaps,
    /// Decode samples from the prior.
    Generate,
    /// k-medoids under Euclidean and geodesic latent distances.
    Cluster,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::MakeShapes => "make-shapes",
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Interpolate => "interpolate",
            Self::MetricMaps => "metric-maps",
            Self::Generate => "generate",
            Self::Cluster => "cluster",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.set;
    if let Some(o) = &cli.output {
        overrides.push(format!("output={}", serde_json::to_string(o).expect("path serializes")));
    }
    let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    commands::run(cli.command, &cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
