use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cf2net::superpixel::SlicParams;
use cf2net::trainer::TrainConfig;

/// Where samples come from and where the prepared copy lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Raw dataset root with `images/` and `masks/`.
    pub root: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading `root`.
    pub synthetic: Option<usize>,
    /// Canonical side length.
    pub size: usize,
    /// Prepared dataset directory read by train/eval/ablate.
    pub prepared: Option<PathBuf>,
    /// Compute the superpixel channel during preparation.
    pub superpixels: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            synthetic: None,
            size: 256,
            prepared: None,
            superpixels: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    /// Variant names; empty means all six.
    pub variants: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    /// Held-out fold; defaults to the fold recorded in the checkpoint.
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    /// Feed the superpixel channel; must match the checkpoint.
    pub superpixels: Option<bool>,
}

/// The full resolved configuration of one command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub superpixel: SlicParams,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub eval: EvalConfig,
    pub predict: PredictConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Copy the shared top-level settings into the training section.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.seed;
        self.train.superpixel = self.superpixel.clone();
        self.train.model.size = self.data.size;
        self
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string_pretty(self).map_err(|e| format!("cannot serialize config: {e}"))
    }
}
