//! Composite objective `total = L_low + λ·L_high`, each term a pixel-mean
//! squared error.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::model::{scalar, ModelOutput};

pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the full-resolution term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        if self.lambda >= 0.0 && self.lambda.is_finite() {
            Vec::new()
        } else {
            vec![format!("loss.lambda must be a non-negative number, got {}", self.lambda)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub low: f64,
    pub high: f64,
}

impl LossBreakdown {
    pub fn combine(low: f64, high: f64, config: &LossConfig) -> Self {
        Self {
            total: low + config.lambda * high,
            low,
            high,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.low.is_finite() && self.high.is_finite()
    }
}

/// Mean squared difference over all pixels.
pub fn mse_map(pred: &DensityMap, target: &DensityMap) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape(),
            actual: pred.shape(),
        });
    }
    if pred.values.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(sse / pred.values.len() as f64)
}

pub fn total_loss(
    output: &ModelOutput,
    gt_low: &DensityMap,
    gt_full: &DensityMap,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let low = mse_map(&output.density_low, gt_low)?;
    let high = mse_map(&output.density_high, gt_full)?;
    Ok(LossBreakdown::combine(low, high, config))
}

/// Differentiable pixel-mean MSE; for equally sized batch items this is
/// also the mean over the batch.
pub fn mse_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} does not match target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Differentiable composite loss plus its logged breakdown.
pub fn total_loss_tensor(
    low: &Tensor,
    high: &Tensor,
    gt_low: &Tensor,
    gt_full: &Tensor,
    config: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let l_low = mse_tensor(low, gt_low)?;
    let l_high = mse_tensor(high, gt_full)?;
    let total = (&l_low + (&l_high * config.lambda)?)?;
    let breakdown = LossBreakdown {
        total: scalar(&total)?,
        low: scalar(&l_low)?,
        high: scalar(&l_high)?,
    };
    Ok((total, breakdown))
}
