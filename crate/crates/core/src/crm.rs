//! Clipped inverse-propensity weights and the pose, counterfactual and combined losses.

use serde::{Deserialize, Serialize};

use crate::camera::PosePair;
use crate::error::{Error, Result};
use crate::propensity::{propensity, HistogramMap};
use crate::skeleton::{Pose2D, Pose3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDirection {
    /// `rho_generated / rho_gt`.
    #[default]
    GeneratedOverGt,
    /// `rho_gt / rho_generated`.
    GtOverGenerated,
}

/// Which 2D poses the weights of a ground-truth batch are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Each ground-truth sample's own 2D pose.
    #[default]
    GtBatch,
    /// The 2D pose at the same position of the paired generated batch.
    GeneratedBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrmConfig {
    /// Upper clip on the propensity ratio.
    pub clip: f64,
    pub ratio_direction: RatioDirection,
    pub weight_source: WeightSource,
    /// Replace every weight by 1 (the ablation control).
    pub unit_weights: bool,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self {
            clip: 10.0,
            ratio_direction: RatioDirection::GeneratedOverGt,
            weight_source: WeightSource::GtBatch,
            unit_weights: false,
        }
    }
}

impl CrmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("crm.clip", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Non-negative finite loss, squared millimetres for the pose losses.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossValue(f64);

impl LossValue {
    pub fn new(v: f64) -> Result<Self> {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::NonFinite("loss value"));
        }
        Ok(Self(v))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `min(rho_gen(x) / rho_gt(x), c)` for the default direction.
pub fn cips_weight(
    x: &Pose2D,
    hist_gt: &HistogramMap,
    hist_gen: &HistogramMap,
    cfg: &CrmConfig,
) -> Result<f64> {
    if cfg.unit_weights {
        return Ok(1.0);
    }
    let rho_gt = propensity(x, hist_gt)?.value();
    let rho_gen = propensity(x, hist_gen)?.value();
    let ratio = match cfg.ratio_direction {
        RatioDirection::GeneratedOverGt => rho_gen / rho_gt,
        RatioDirection::GtOverGenerated => rho_gt / rho_gen,
    };
    if !(ratio > 0.0) {
        return Err(Error::InvalidValue(
            "propensity ratio is not positive; histograms need epsilon > 0".into(),
        ));
    }
    Ok(ratio.min(cfg.clip))
}

pub fn cips_weights(
    inputs: &[Pose2D],
    hist_gt: &HistogramMap,
    hist_gen: &HistogramMap,
    cfg: &CrmConfig,
) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|x| cips_weight(x, hist_gt, hist_gen, cfg))
        .collect()
}

/// Squared coordinate error averaged over all `3J` coordinates.
pub fn pose_loss(predicted: &Pose3D, target: &Pose3D) -> Result<LossValue> {
    if predicted.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "pose loss",
            expected: target.len(),
            actual: predicted.len(),
        });
    }
    let sum: f64 = predicted
        .joints()
        .iter()
        .zip(target.joints())
        .map(|(p, t)| (p - t).norm_squared())
        .sum();
    LossValue::new(sum / (3 * target.len()) as f64)
}

/// Batch mean of `weights[i] * pose_loss(predictions[i], batch[i].target)`.
pub fn counterfactual_loss(
    batch: &[PosePair],
    predictions: &[Pose3D],
    weights: &[f64],
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Empty("counterfactual batch"));
    }
    for (context, n) in [("predictions", predictions.len()), ("weights", weights.len())] {
        if n != batch.len() {
            return Err(Error::DimensionMismatch {
                context,
                expected: batch.len(),
                actual: n,
            });
        }
    }
    let mut sum = 0.0;
    for ((pair, pred), w) in batch.iter().zip(predictions).zip(weights) {
        sum += w * pose_loss(pred, &pair.target)?.value();
    }
    LossValue::new(sum / batch.len() as f64)
}

/// Counterfactual loss with weights evaluated at each ground-truth sample's 2D pose.
pub fn counterfactual_loss_at_inputs(
    batch: &[PosePair],
    predictions: &[Pose3D],
    hist_gt: &HistogramMap,
    hist_gen: &HistogramMap,
    cfg: &CrmConfig,
) -> Result<LossValue> {
    let inputs: Vec<Pose2D> = batch.iter().map(|p| p.input.clone()).collect();
    let weights = cips_weights(&inputs, hist_gt, hist_gen, cfg)?;
    counterfactual_loss(batch, predictions, &weights)
}

/// `L_A = L_P + lambda * L_co`.
pub fn total_loss_weighted(pose: LossValue, co: LossValue, lambda: f64) -> Result<LossValue> {
    LossValue::new(pose.0 + lambda * co.0)
}

pub fn total_loss(pose: LossValue, co: LossValue) -> LossValue {
    LossValue(pose.0 + co.0)
}
