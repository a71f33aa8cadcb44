//! `spatial-risk` command-line interface.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use thiserror::Error;

use spatial_risk::distributions::DistributionFamily;
use spatial_risk::params::CorrStructure;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] spatial_risk::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 2 for usage and configuration problems, 3 for bad input data or files,
    /// 4 for numerical failures during fitting.
    pub fn exit_code(&self) -> u8 {
        use spatial_risk::Error as E;
        match self {
            Self::Usage(_) | Self::Core(E::Config(_)) => 2,
            Self::Io { .. }
            | Self::Core(E::Parse { .. } | E::Validation(_) | E::Domain(_) | E::Io(_) | E::Csv(_)) => 3,
            Self::Core(E::Numerical(_) | E::NotPositiveDefinite { .. } | E::Initialization(_)) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spatial-risk", version, about = "Spatially correlated competing-risks failure models")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a data file and report counts and prior propriety.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate a synthetic dataset from the reference parameters.
    Simulate {
        #[arg(long)]
        n_units: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the joint posterior.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Sampler seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo EM point estimates.
    FitEm {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convergence diagnostics of a draws file.
    Diagnose {
        #[command(flatten)]
        draws: DrawsArgs,
    },
    /// PSIS leave-one-out cross-validation.
    Loo {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        draws: DrawsArgs,
    },
    /// Cox–Snell residuals and probability plots.
    Residuals {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        draws: DrawsArgs,
    },
    /// Per-mode Kaplan–Meier curves and binned failure-time mass.
    Km {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        upper: Option<f64>,
    },
    /// Failure-proportion maps over the grid.
    Heatmap {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Marginal cross-mode and spatial failure-time correlations.
    Correlate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        draws: DrawsArgs,
        /// Numeric covariates of the unit, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "position")]
        covariates: Option<Vec<f64>>,
        /// Cage, slot and node of a positional unit, comma separated.
        #[arg(long, value_delimiter = ',')]
        position: Option<Vec<u8>>,
        /// Distances for the spatial curve, comma separated.
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
        #[arg(long)]
        n_effects: Option<usize>,
        #[arg(long)]
        n_times: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Smallest eigenvalue of the spatial correlation matrix over (ν, κ).
    Eigmap {
        #[arg(long, value_parser = parse_grid)]
        grid: Option<[usize; 2]>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        nu_max: Option<f64>,
    },
    /// Parameter-recovery simulation study.
    Study {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sides: Option<Vec<usize>>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Grid as ROWSxCOLS, e.g. 8x25.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<[usize; 2]>,
    /// Column relabelling CSV.
    #[arg(long)]
    pub relabel: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// weibull or lognormal.
    #[arg(long, value_parser = parse_family)]
    pub family: Option<DistributionFamily>,
    /// pexp, exp, gau, indep or none.
    #[arg(long, value_parser = parse_corr)]
    pub corr: Option<CorrStructure>,
    /// Two-component mixture for mode 2.
    #[arg(long, action = ArgAction::Set)]
    pub mixture: Option<bool>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DrawsArgs {
    /// Posterior draws written by `fit` (default: draws.csv in the output directory).
    #[arg(long)]
    pub draws: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<[usize; 2], String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s}"))?;
    let r = r.trim().parse().map_err(|_| format!("bad row count in {s}"))?;
    let c = c.trim().parse().map_err(|_| format!("bad column count in {s}"))?;
    Ok([r, c])
}

fn parse_family(s: &str) -> Result<DistributionFamily, String> {
    s.parse().map_err(|e: spatial_risk::Error| e.to_string())
}

fn parse_corr(s: &str) -> Result<CorrStructure, String> {
    s.parse().map_err(|e: spatial_risk::Error| e.to_string())
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(g) = self.grid {
            cfg.data.grid = g;
        }
        if let Some(p) = &self.relabel {
            cfg.data.relabel = Some(p.clone());
        }
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(f) = self.family {
            cfg.model.family = f;
        }
        if let Some(c) = self.corr {
            cfg.model.corr = c;
        }
        if let Some(m) = self.mixture {
            cfg.model.mixture = m;
        }
    }
}

impl SamplerArgs {
    fn apply(&self, s: &mut spatial_risk::sampler::SamplerConfig) {
        if let Some(v) = self.chains {
            s.chains = v;
        }
        if let Some(v) = self.warmup {
            s.warmup = v;
        }
        if let Some(v) = self.samples {
            s.samples = v;
        }
    }
}

impl DrawsArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.draws {
            cfg.data.draws = Some(p.clone());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = dir.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    commands::dispatch(&cli.command, cfg, cli.config.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
