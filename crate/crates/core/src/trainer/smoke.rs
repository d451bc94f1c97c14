use serde::{Deserialize, Serialize};

use super::train::{train_step, Batch};
use crate::dataset::{generate_synthetic, preprocess_sample, Sample};
use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::{Cf2Net, ModelConfig};
use crate::nn::{Optimizer, OptimizerConfig, ParamStore};
use crate::superpixel::SlicParams;

/// Settings of the optimization sanity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverfitConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    /// Used when the model takes the superpixel channel.
    pub superpixel: SlicParams,
    pub samples: usize,
    pub max_steps: usize,
    /// Pass when the loss drops below this fraction of its first value.
    pub target_ratio: f64,
    pub seed: u64,
    /// Keep stepping after the target is reached.
    pub run_all_steps: bool,
}

impl Default for OverfitConfig {
    /// Full network at base width 8 on 64×64 inputs.
    fn default() -> Self {
        OverfitConfig {
            model: ModelConfig::desk(8, 64),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::Adam {
                learning_rate: 3e-3,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            superpixel: SlicParams::default(),
            samples: 4,
            max_steps: 500,
            target_ratio: 0.1,
            seed: 0,
            run_all_steps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub passed: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Total loss before each step.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub all_finite: bool,
    /// Error text when training aborted.
    pub failure: Option<String>,
}

/// Fixed synthetic samples for the check, with the superpixel channel when
/// the model uses one.
pub fn overfit_samples(config: &OverfitConfig) -> Result<Vec<Sample>> {
    let s = config.model.size;
    let index = generate_synthetic(config.samples, s, config.seed)?;
    index
        .entries
        .iter()
        .map(|e| {
            let sample = preprocess_sample(e.id.clone(), &e.load()?, s)?;
            if config.model.use_superpixel {
                sample.with_superpixels(&config.superpixel)
            } else {
                Ok(sample)
            }
        })
        .collect()
}

/// Trained network and weights from [`overfit_smoke_test`].
pub struct OverfitRun {
    pub report: OverfitReport,
    pub net: Cf2Net,
    pub store: ParamStore,
    pub samples: Vec<Sample>,
}

/// Fit one fixed batch; passes iff the total loss falls below
/// `target_ratio` of its initial value within `max_steps` with every loss
/// and gradient finite. Failure is a result, not an error, except for
/// invalid configurations.
pub fn overfit_smoke_test(config: &OverfitConfig) -> Result<OverfitRun> {
    let samples = overfit_samples(config)?;
    let (net, mut store) = Cf2Net::build(&config.model, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::new(&refs, &config.model)?;
    let mut losses = Vec::with_capacity(config.max_steps);
    let mut failure = None;
    let mut reached = false;
    for step in 0..config.max_steps {
        match train_step(
            &net,
            &mut store,
            &mut optimizer,
            &batch,
            &config.loss,
            None,
            &format!("step {step}"),
        ) {
            Ok(l) => losses.push(l.total),
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
        let first = losses[0];
        reached |= *losses.last().expect("pushed") < config.target_ratio * first;
        if reached && !config.run_all_steps {
            break;
        }
    }
    let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    let all_finite = failure.is_none();
    let report = OverfitReport {
        passed: reached && all_finite,
        initial_loss,
        final_loss,
        steps: losses.len(),
        losses,
        all_finite,
        failure,
    };
    Ok(OverfitRun {
        report,
        net,
        store,
        samples,
    })
}
