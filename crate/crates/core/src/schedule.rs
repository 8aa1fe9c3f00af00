//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Step schedule: 0.1 cut by 4% every 4 epochs, floored at 0.0005.
pub const STEP_INIT: f64 = 0.1;
pub const STEP_FACTOR: f64 = 0.96;
pub const STEP_EVERY_EPOCHS: u32 = 4;
pub const STEP_FLOOR: f64 = 0.0005;

/// Polynomial schedule: decay from 0.01 with power 0.5, applied per
/// mini-batch iteration.
pub const POLY_BASE: f64 = 0.01;
pub const POLY_POWER: f64 = 0.5;

/// `max(0.0005, 0.1 * 0.96^floor(epoch/4))`.
pub fn lr_step_decay(epoch: u32) -> f64 {
    let steps = (epoch / STEP_EVERY_EPOCHS) as i32;
    (STEP_INIT * STEP_FACTOR.powi(steps)).max(STEP_FLOOR)
}

/// `0.01 * (1 - iter/max_iter)^0.5`.
pub fn lr_poly_decay(iter: u64, max_iter: u64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("poly decay needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::InvalidArgument(format!(
            "poly decay iteration {iter} exceeds max_iter {max_iter}"
        )));
    }
    let frac = iter as f64 / max_iter as f64;
    Ok(POLY_BASE * (1.0 - frac).powf(POLY_POWER))
}

/// Schedule choice for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// Per-epoch step decay.
    StepDecay,
    /// Per-iteration polynomial decay over the stage's full iteration budget.
    PolyDecay,
}

impl Schedule {
    /// Learning rate for mini-batch `iter` of `max_iter` within `epoch`.
    pub fn learning_rate(self, epoch: u32, iter: u64, max_iter: u64) -> Result<f64> {
        match self {
            Schedule::StepDecay => Ok(lr_step_decay(epoch)),
            Schedule::PolyDecay => lr_poly_decay(iter, max_iter),
        }
    }
}
