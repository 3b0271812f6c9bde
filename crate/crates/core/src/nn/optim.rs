use super::{Gradients, MultiTaskModel};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub eta0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(config_err("hyper.eta0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("hyper.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("hyper.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err("hyper.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Polynomial decay `eta0 · (1 − r/R)^0.9`.
pub fn poly_lr(round: usize, total: usize, eta0: f64) -> Result<f64> {
    if round > total || total == 0 {
        return Err(Error::RoundOutOfRange { round, total });
    }
    Ok(eta0 * (1.0 - round as f64 / total as f64).powf(0.9))
}

/// `v ← μ·v + (g + λ·w); w ← w − lr·v` on the blocks present in `grads`.
pub fn sgd_step(model: &mut MultiTaskModel, grads: &Gradients, lr: f64, hyper: &HyperParams) -> Result<()> {
    model.apply_update(grads, lr, hyper.momentum, hyper.weight_decay)
}
