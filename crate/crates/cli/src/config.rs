//! Run configuration: every hyperparameter a command can use, loadable from
//! TOML. Command-line flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthrad_core::diffusion::{DenoiserConfig, ScheduleConfig};
use synthrad_core::eval::ClassifierConfig;
use synthrad_core::optim::AdamConfig;
use synthrad_core::pggan::GanConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "SYNTHRAD_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub train: TrainSettings,
    pub diffusion: DiffusionSettings,
    pub pggan: GanSettings,
    pub classifier: ClassifierConfig,
    pub experiment: ExperimentSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    /// 0 writes only the final checkpoint.
    pub ckpt_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            ckpt_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSettings {
    pub model: GanConfig,
    pub steps_fade: u64,
    pub steps_stable: u64,
    pub adam: AdamConfig,
    /// Latents scored when deriving a class latent.
    pub n_probe: usize,
    /// Standard deviation of the perturbation around a class latent.
    pub spread: f32,
}

impl Default for GanSettings {
    fn default() -> Self {
        Self {
            model: GanConfig::default(),
            steps_fade: 300,
            steps_stable: 300,
            adam: AdamConfig {
                lr: 1e-4,
                beta1: 0.5,
                beta2: 0.99,
                eps: 1e-8,
            },
            n_probe: 1000,
            spread: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub disease: String,
    pub rows: String,
    pub test_size: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            disease: "Edema".into(),
            rows: "1000:0,500:500".into(),
            test_size: 300,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Flag, then config file, then `SYNTHRAD_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> CliResult<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(text) => text
                    .trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises to TOML")
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }
}
