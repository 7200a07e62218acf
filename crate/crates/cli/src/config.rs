//! Pipeline configuration loaded from TOML.
//!
//! Every table is optional and missing keys take the library defaults.
//! Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfdepth::losses::LossWeights;
use sfdepth::matching::MatchConfig;
use sfdepth::pnp::PnpRansacConfig;
use sfdepth::propagation::FlowSolverConfig;
use sfdepth::recon::ReconConfig;
use sfdepth::rotfilter::RansacConfig;
use sfdepth::{Error, Result};

/// Source of the flow that supervises reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    /// Propagated flow from matched seeds.
    #[default]
    Sfnet,
    /// Rigid flow of the ground-truth depth under the EPnP pose of the seeds.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Grid spacing of the flow samples fed to RANSAC.
    pub stride: usize,
    pub ransac: RansacConfig,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            stride: 8,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    #[serde(deserialize_with = "sfdepth::losses::deserialize_depth_weights")]
    pub weights: LossWeights,
    pub solver: ReconConfig,
    pub supervision: Supervision,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            weights: LossWeights::depth_defaults(),
            solver: ReconConfig::default(),
            supervision: Supervision::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every random generator: corpus synthesis and both RANSACs.
    pub seed: u64,
    /// Worker threads for per-sample stages; 0 uses every core.
    pub jobs: usize,
    pub matching: MatchConfig,
    pub flow: FlowSolverConfig,
    pub filter: FilterSection,
    pub oracle: PnpRansacConfig,
    pub recon: ReconSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter.stride == 0 {
            return Err(Error::Config("filter.stride must be >= 1".into()));
        }
        self.flow.validate()?;
        self.filter.ransac.validate()?;
        self.oracle.validate()?;
        self.recon.weights.validate()?;
        self.recon.solver.validate()
    }

    /// Propagates `seed` into every module seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.filter.ransac.rng_seed = seed;
        self.oracle.rng_seed = seed;
        self
    }
}
