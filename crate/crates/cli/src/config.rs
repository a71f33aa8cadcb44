//! Run configuration file (TOML, `version = 1`). Every section is optional and
//! missing keys take their defaults; command-line flags override the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spatial_risk::evaluation::CorrelationSettings;
use spatial_risk::mcem::McemConfig;
use spatial_risk::params::ModelConfig;
use spatial_risk::sampler::SamplerConfig;
use spatial_risk::simulation::StudyConfig;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub output: OutputSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub mcem: McemConfig,
    pub simulation: SimulationSection,
    pub km: KmSection,
    pub correlate: CorrelateSection,
    pub eigmap: EigmapSection,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            output: OutputSection::default(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            mcem: McemConfig::default(),
            simulation: SimulationSection::default(),
            km: KmSection::default(),
            correlate: CorrelateSection::default(),
            eigmap: EigmapSection::default(),
            study: StudyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from(".") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// `[rows, cols]`.
    pub grid: [usize; 2],
    /// Optional column relabelling CSV.
    pub relabel: Option<PathBuf>,
    /// Posterior draws for post-fit commands.
    pub draws: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: None, grid: [8, 25], relabel: None, draws: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_units: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { n_units: 5000, side: 5, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmSection {
    pub bins: usize,
    /// Upper end of the binned pmf; the largest observed time when absent.
    pub upper: Option<f64>,
}

impl Default for KmSection {
    fn default() -> Self {
        Self { bins: 30, upper: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateSection {
    pub settings: CorrelationSettings,
    /// Numeric covariates of the unit.
    pub covariates: Option<Vec<f64>>,
    /// `[cage, slot, node]` for positional data.
    pub position: Option<[u8; 3]>,
    /// Distances for the spatial correlation curve.
    pub distances: Vec<f64>,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        Self {
            settings: CorrelationSettings::default(),
            covariates: None,
            position: None,
            distances: (0..=10).map(|i| i as f64 * std::f64::consts::SQRT_2 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigmapSection {
    pub resolution: usize,
    pub nu_max: f64,
}

impl Default for EigmapSection {
    fn default() -> Self {
        Self { resolution: 40, nu_max: 3.0 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config file: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
