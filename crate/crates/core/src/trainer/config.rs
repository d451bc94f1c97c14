use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::nn::OptimizerConfig;
use crate::superpixel::SlicParams;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Cross-validation fold count.
    pub folds: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Region-mean channel parameters, used when `model.use_superpixel`.
    pub superpixel: SlicParams,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    /// Random left-right flips of training batches.
    pub augment_flip: bool,
    /// Validate every this many epochs; the last epoch is always validated.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            epochs: 500,
            seed: 0,
            folds: 4,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            superpixel: SlicParams::default(),
            clip_norm: None,
            augment_flip: false,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1".into());
        }
        if self.folds < 2 {
            return fail(format!("folds must be ≥ 2, got {}", self.folds));
        }
        if self.validate_every == 0 {
            return fail("validate_every must be ≥ 1".into());
        }
        self.optimizer.validate()?;
        let lr = self.optimizer.learning_rate();
        if lr <= 0.0 {
            return fail(format!("learning rate must be > 0, got {lr}"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.use_superpixel {
            self.superpixel.validate()?;
        }
        Ok(())
    }

    /// Superpixel parameters when the model consumes the channel.
    pub fn superpixel_params(&self) -> Option<&SlicParams> {
        self.model.use_superpixel.then_some(&self.superpixel)
    }
}
