use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

/// Local optimizer settings. The learning rate decays geometrically with the
/// communication round, not with the local step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    #[serde(rename = "lr")]
    pub lr0: f64,
    #[serde(rename = "decay")]
    pub lr_round_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(rename = "batch")]
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.01,
            lr_round_decay: 0.99,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 40,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("sgd.lr must be positive"));
        }
        if !(self.lr_round_decay > 0.0 && self.lr_round_decay.is_finite()) {
            return Err(Error::config("sgd.decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("sgd.momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("sgd.weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sgd.batch must be at least 1"));
        }
        Ok(())
    }

    /// `lr0 * decay^round`, with round 0 being the first training round.
    pub fn lr(&self, round: usize) -> f64 {
        self.lr0 * self.lr_round_decay.powi(round as i32)
    }
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub fn sgd_step_with_lr(
    params: &mut ParamVector,
    grads: &ParamVector,
    velocity: &mut ParamVector,
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("gradient", params.len(), grads.len()));
    }
    if params.len() != velocity.len() {
        return Err(Error::dim("momentum state", params.len(), velocity.len()));
    }
    grads.check_finite()?;
    let p = params.values_mut();
    let v = velocity.values_mut();
    for ((w, m), &g) in p.iter_mut().zip(v.iter_mut()).zip(grads.values()) {
        *m = momentum * *m + (g + weight_decay * *w);
        *w -= lr * *m;
    }
    Ok(())
}

pub fn sgd_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    velocity: &mut ParamVector,
    config: &SgdConfig,
    round: usize,
) -> Result<()> {
    sgd_step_with_lr(
        params,
        grads,
        velocity,
        config.momentum,
        config.weight_decay,
        config.lr(round),
    )
}
