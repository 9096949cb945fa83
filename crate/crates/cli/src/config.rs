use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sedformer::data::{PrepareConfig, SynthConfig, VizConfig};
use sedformer::energy::EnergyModel;
use sedformer::head::{ModelConfig, TrainConfig};
use sedformer::sweep::{SweepAxis, SweepParam};

/// Every module's settings in one file. Command-line flags override the
/// values loaded with `--config`, which override the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub prepare: PrepareConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Initialization seed of the model parameters.
    pub model_seed: u64,
    pub energy: EnergyModel,
    pub viz: VizConfig,
    pub sweep_axes: Vec<SweepAxis>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            prepare: PrepareConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_seed: 0,
            energy: EnergyModel::default(),
            viz: VizConfig::default(),
            sweep_axes: SweepParam::ALL.into_iter().map(|param| SweepAxis { param, values: param.grid() }).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = serde_json::from_str(&text).map_err(sedformer::Error::from).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
