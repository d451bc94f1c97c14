use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer choice and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Per-coordinate step `lr·g/(sqrt(Σg²)+ε)`.
    Adagrad {
        learning_rate: f64,
        #[serde(default = "default_adagrad_epsilon")]
        epsilon: f64,
        #[serde(default)]
        initial_accumulator: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_epsilon")]
        epsilon: f64,
    },
    /// Heavy-ball SGD, the momentum-bearing alternative.
    SgdMomentum {
        learning_rate: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn default_adagrad_epsilon() -> f64 {
    1e-7
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_epsilon() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adagrad {
            learning_rate: 6e-4,
            epsilon: default_adagrad_epsilon(),
            initial_accumulator: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Adagrad { learning_rate, .. }
            | OptimizerConfig::Adam { learning_rate, .. }
            | OptimizerConfig::SgdMomentum { learning_rate, .. } => learning_rate,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        match &mut self {
            OptimizerConfig::Adagrad { learning_rate, .. }
            | OptimizerConfig::Adam { learning_rate, .. }
            | OptimizerConfig::SgdMomentum { learning_rate, .. } => *learning_rate = lr,
        }
        self
    }

    fn slot_names(&self) -> &'static [&'static str] {
        match self {
            OptimizerConfig::Adagrad { .. } => &["accumulator"],
            OptimizerConfig::Adam { .. } => &["m", "v"],
            OptimizerConfig::SgdMomentum { .. } => &["velocity"],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and ≥ 0, got {lr}"
            )));
        }
        Ok(())
    }
}

pub struct Optimizer {
    config: OptimizerConfig,
    slots: BTreeMap<ParamId, Vec<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            slots: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn init_slots(&self, shape: [usize; 4]) -> Vec<Tensor> {
        match self.config {
            OptimizerConfig::Adagrad {
                initial_accumulator,
                ..
            } => {
                vec![Tensor::full(shape, initial_accumulator as f32)]
            }
            OptimizerConfig::Adam { .. } => vec![Tensor::zeros(shape), Tensor::zeros(shape)],
            OptimizerConfig::SgdMomentum { .. } => vec![Tensor::zeros(shape)],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        self.steps += 1;
        let t = self.steps as f64;
        for (&id, g) in grads {
            if store.kind(id) != super::ParamKind::Trainable {
                continue;
            }
            if !self.slots.contains_key(&id) {
                let s = self.init_slots(g.shape());
                self.slots.insert(id, s);
            }
            let slots = self.slots.get_mut(&id).expect("slot just inserted");
            let p = store.get_mut(id);
            match self.config {
                OptimizerConfig::Adagrad {
                    learning_rate,
                    epsilon,
                    ..
                } => {
                    let (lr, eps) = (learning_rate as f32, epsilon as f32);
                    let acc = &mut slots[0];
                    for ((p, a), &g) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                        *a += g * g;
                        *p -= lr * g / (a.sqrt() + eps);
                    }
                }
                OptimizerConfig::Adam {
                    learning_rate,
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let lr_t = learning_rate * (1.0 - beta2.powf(t)).sqrt() / (1.0 - beta1.powf(t));
                    let (b1, b2, lr_t, eps) =
                        (beta1 as f32, beta2 as f32, lr_t as f32, epsilon as f32);
                    let (m, v) = slots.split_at_mut(1);
                    for (((p, m), v), &g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m[0].data_mut())
                        .zip(v[0].data_mut())
                        .zip(g.data())
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr_t * *m / (v.sqrt() + eps);
                    }
                }
                OptimizerConfig::SgdMomentum {
                    learning_rate,
                    momentum,
                } => {
                    let (lr, mu) = (learning_rate as f32, momentum as f32);
                    let vel = &mut slots[0];
                    for ((p, v), &g) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                        *v = mu * *v - lr * g;
                        *p += *v;
                    }
                }
            }
        }
    }

    /// Slot tensors keyed `optim.<param name>.<slot>`.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let names = self.config.slot_names();
        let mut out = Vec::new();
        for (id, slots) in &self.slots {
            for (slot, t) in names.iter().zip(slots) {
                out.push((format!("optim.{}.{slot}", store.name(*id)), t.clone()));
            }
        }
        out
    }

    pub fn restore(
        config: OptimizerConfig,
        steps: u64,
        store: &ParamStore,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut opt = Optimizer::new(config);
        opt.steps = steps;
        let names = opt.config.slot_names();
        for id in store.trainable_ids() {
            let mut slots = Vec::new();
            for slot in names {
                let key = format!("optim.{}.{slot}", store.name(id));
                if let Some(t) = tensors.get(&key) {
                    if t.shape() != store.get(id).shape() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer slot {key} has shape {:?}",
                            t.shape()
                        )));
                    }
                    slots.push(t.clone());
                }
            }
            match slots.len() {
                0 => {}
                n if n == names.len() => {
                    opt.slots.insert(id, slots);
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "incomplete optimizer state for {}",
                        store.name(id)
                    )))
                }
            }
        }
        Ok(opt)
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.values_mut().for_each(|g| g.scale(s));
    }
    norm
}
