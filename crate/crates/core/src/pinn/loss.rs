//! Loss terms of the composite training objective.

use super::features::{IDX_I, IDX_ROCOF, IDX_ROCOV, N_FEATURES};
use crate::SimError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pde: f64,
    pub lambda_current: f64,
    pub lambda_rocof: f64,
    pub lambda_rocov: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pde: 0.1,
            lambda_current: 1.0,
            lambda_rocof: 0.1,
            lambda_rocov: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: f64,
    pub physics: f64,
    pub current: f64,
    pub rocof: f64,
    pub rocov: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }

    pub fn is_finite(&self) -> bool {
        [self.mse, self.physics, self.current, self.rocof, self.rocov].iter().all(|x| x.is_finite())
    }
}

/// Mean of squared residual entries.
pub fn loss_mse(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<f64, SimError> {
    if pred.len() != target.len() {
        return Err(SimError::ShapeMismatch("prediction and target lengths differ".into()));
    }
    if pred.is_empty() {
        return Err(SimError::EmptyBatch);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(s / (2 * pred.len()) as f64)
}

/// Mean of `|Δv̂/Δt + v̂|` over components and consecutive pairs.
pub fn loss_physics(pred: &[[f64; 2]], dt: f64) -> Result<f64, SimError> {
    if pred.len() < 2 {
        return Err(SimError::TrajectoryTooShort);
    }
    let mut s = 0.0;
    for w in pred.windows(2) {
        for c in 0..2 {
            s += ((w[1][c] - w[0][c]) / dt + w[0][c]).abs();
        }
    }
    Ok(s / (2 * (pred.len() - 1)) as f64)
}

/// Hinge on the output-current magnitude above `1.2·i_peak`.
pub fn current_excess(x: &[f64; N_FEATURES], i_peak: f64) -> f64 {
    let i = IDX_I.iter().map(|&k| x[k] * x[k]).sum::<f64>().sqrt();
    (i - 1.2 * i_peak).max(0.0)
}

pub fn loss_current(batch: &[[f64; N_FEATURES]], i_peak: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|x| current_excess(x, i_peak)).sum::<f64>() / batch.len() as f64
}

fn mean_abs(batch: &[[f64; N_FEATURES]], k: usize) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|x| x[k].abs()).sum::<f64>() / batch.len() as f64
}

pub fn loss_rocof(batch: &[[f64; N_FEATURES]]) -> f64 {
    mean_abs(batch, IDX_ROCOF)
}

pub fn loss_rocov(batch: &[[f64; N_FEATURES]]) -> f64 {
    mean_abs(batch, IDX_ROCOV)
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.mse + w.lambda_pde * c.physics + w.lambda_current * c.current + w.lambda_rocof * c.rocof + w.lambda_rocov * c.rocov
}
