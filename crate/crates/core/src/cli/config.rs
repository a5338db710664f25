use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::BasisSettings;
use crate::error::{Error, Result};
use crate::sampler::{PriorConfig, SamplerConfig};
use crate::simgen::{DistanceStudy, EffectSizeStudy, ScenarioConfig};

pub const DEFAULT_GRID_POINTS: usize = 100;
pub const DEFAULT_RHAT_THRESHOLD: f64 = 1.05;
pub const DEFAULT_SEED: u64 = 1;

/// Settings file shared by every subcommand; each reads the parts it needs.
/// Precedence is built-in defaults < this file < command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub subjects: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub grid_points: usize,
    pub rhat_threshold: f64,
    pub strict_rhat: bool,
    /// Functionals checked by R̂; `None` picks the standard set.
    pub functionals: Option<Vec<String>>,
    /// Overrides the basis given in the schema.
    pub basis: Option<BasisSettings>,
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
    pub scenario: ScenarioConfig,
    pub effect_size: EffectSizeStudy,
    pub distance: DistanceStudy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            subjects: None,
            distances: None,
            schema: None,
            grid_points: DEFAULT_GRID_POINTS,
            rhat_threshold: DEFAULT_RHAT_THRESHOLD,
            strict_rhat: false,
            functionals: None,
            basis: None,
            sampler: SamplerConfig {
                chains: 2,
                ..SamplerConfig::default()
            },
            prior: PriorConfig::default(),
            scenario: ScenarioConfig::default(),
            effect_size: EffectSizeStudy::default(),
            distance: DistanceStudy::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::Config("grid_points must be at least 2".into()));
        }
        if !(self.rhat_threshold > 1.0) {
            return Err(Error::Config(format!(
                "rhat_threshold must exceed 1, got {}",
                self.rhat_threshold
            )));
        }
        self.sampler.validate()?;
        self.prior.validate()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a canonical JSON rendering of everything that determines a
/// command's numeric output (never output paths).
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    sha256_hex(text.as_bytes())
}
