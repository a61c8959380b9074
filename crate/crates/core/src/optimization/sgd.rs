//! Poly learning-rate schedule and Nesterov-momentum SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_nesterov")]
    pub nesterov: bool,
    #[serde(default = "default_epoch_max")]
    pub epoch_max: usize,
}

fn default_lr0() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.99
}
fn default_nesterov() -> bool {
    true
}
fn default_epoch_max() -> usize {
    200
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: default_lr0(),
            momentum: default_momentum(),
            nesterov: default_nesterov(),
            epoch_max: default_epoch_max(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.epoch_max == 0 {
            return Err(Error::Config("epoch_max must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus one velocity buffer per updated parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            velocity: BTreeMap::new(),
        })
    }
}

/// `lr0 · (1 − epoch / epoch_max)^0.9`.
pub fn poly_lr(epoch: usize, config: &OptimizerConfig) -> Result<f64> {
    if epoch > config.epoch_max {
        return Err(Error::EpochRange {
            epoch,
            epoch_max: config.epoch_max,
        });
    }
    if epoch == config.epoch_max {
        return Ok(0.0);
    }
    Ok(config.lr0 * (1.0 - epoch as f64 / config.epoch_max as f64).powf(0.9))
}

/// One momentum step: `v ← μv + g`, then `θ ← θ − lr·(g + μv)` (Nesterov) or
/// `θ ← θ − lr·v`. A gradient for a frozen parameter is a contract violation
/// and nothing is updated.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, lr: f64, state: &mut OptimizerState) -> Result<()> {
    for name in grads.names() {
        let p = params.get(name)?;
        if p.frozen {
            return Err(Error::FrozenGradient(name.clone()));
        }
        if grads.get(name).map(<[f64]>::len) != Some(p.data.len()) {
            return Err(Error::Shape(format!("gradient length mismatch for {name}")));
        }
    }
    let mu = state.config.momentum;
    let nesterov = state.config.nesterov;
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((theta, vel), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = mu * *vel + gi;
            let step = if nesterov { gi + mu * *vel } else { *vel };
            *theta -= lr * step;
        }
    }
    Ok(())
}
