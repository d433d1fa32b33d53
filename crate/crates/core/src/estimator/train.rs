use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, EstimatorModel, LossBatch, LossParts, Real};
use super::optim::{Optimizer, OptimizerKind};
use super::{input_matrix, target_matrix, InputNormalizer};
use crate::camera::PosePair;
use crate::crm::{cips_weights, CrmConfig, WeightSource};
use crate::error::{Error, Result};
use crate::propensity::HistogramMap;
use crate::skeleton::Pose2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub rng_seed: u64,
    /// Fraction of the ground-truth set used for the counterfactual term and its histogram.
    pub gt_fraction: f64,
    pub lambda_co: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            rng_seed: 0,
            gt_fraction: 0.25,
            lambda_co: 1.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.gt_fraction > 0.0 && self.gt_fraction <= 1.0) {
            return Err(Error::config("train.gt_fraction", "must lie in (0, 1]"));
        }
        if !(self.lambda_co >= 0.0 && self.lambda_co.is_finite()) {
            return Err(Error::config("train.lambda_co", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Whole-set losses after an epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub pose: f64,
    pub counterfactual: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_p,l_co,l_a\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.pose, r.counterfactual, r.total
            ));
        }
        out
    }

    pub fn first(&self) -> Option<&EpochLoss> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.rows.last()
    }
}

/// Training sets as matrices, with the cIPS weights already evaluated.
pub struct PreparedData<T: Real> {
    pub gen_inputs: Array2<T>,
    pub gen_targets: Array2<T>,
    pub gt_inputs: Array2<T>,
    pub gt_targets: Array2<T>,
    /// Weights at the ground-truth 2D poses.
    pub gt_weights: Vec<f64>,
    /// Weights at the generated 2D poses; used when pairing by batch position.
    pub gen_weights: Vec<f64>,
    pub weight_source: WeightSource,
}

pub fn prepare<T: Real>(
    generated: &[PosePair],
    gt: &[PosePair],
    hist_gt: &HistogramMap,
    hist_gen: &HistogramMap,
    normalizer: &InputNormalizer,
    joints: usize,
    crm: &CrmConfig,
) -> Result<PreparedData<T>> {
    crm.validate()?;
    let gen_in: Vec<&Pose2D> = generated.iter().map(|p| &p.input).collect();
    let gt_in: Vec<&Pose2D> = gt.iter().map(|p| &p.input).collect();
    let owned = |v: &[&Pose2D]| v.iter().map(|p| (*p).clone()).collect::<Vec<_>>();
    let gt_weights = cips_weights(&owned(&gt_in), hist_gt, hist_gen, crm)?;
    let gen_weights = match crm.weight_source {
        WeightSource::GtBatch => Vec::new(),
        WeightSource::GeneratedBatch => cips_weights(&owned(&gen_in), hist_gt, hist_gen, crm)?,
    };
    Ok(PreparedData {
        gen_inputs: input_matrix(normalizer, &gen_in, joints)?,
        gen_targets: target_matrix(generated, joints)?,
        gt_inputs: input_matrix(normalizer, &gt_in, joints)?,
        gt_targets: target_matrix(gt, joints)?,
        gt_weights,
        gen_weights,
        weight_source: crm.weight_source,
    })
}

/// Trains `model` in place and returns the per-epoch loss trace.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    model: &mut EstimatorModel<T>,
    generated: &[PosePair],
    gt: &[PosePair],
    hist_gt: &HistogramMap,
    hist_gen: &HistogramMap,
    normalizer: &InputNormalizer,
    cfg: &TrainConfig,
    crm: &CrmConfig,
) -> Result<LossTrace> {
    let joints = model.architecture().joints;
    let data = prepare(generated, gt, hist_gt, hist_gen, normalizer, joints, crm)?;
    train_prepared(model, &data, cfg)
}

impl<T: Real> PreparedData<T> {
    fn gt_weight(&self, gt_row: usize, paired_gen_row: usize) -> f64 {
        match self.weight_source {
            WeightSource::GtBatch => self.gt_weights[gt_row],
            WeightSource::GeneratedBatch => self.gen_weights[paired_gen_row],
        }
    }

    /// `L_P` over the full generated set and unscaled `L_co` over the full
    /// ground-truth sample. Ground-truth row `k` pairs with generated row
    /// `k mod n` for position-paired weights.
    fn evaluate(&self, model: &EstimatorModel<T>) -> Result<LossParts> {
        const CHUNK: usize = 4096;
        let n_gen = self.gen_inputs.nrows();
        let n_gt = self.gt_inputs.nrows();
        let mut pose = 0.0;
        for start in (0..n_gen).step_by(CHUNK) {
            let end = (start + CHUNK).min(n_gen);
            let batch = LossBatch {
                inputs: self.gen_inputs.slice(ndarray::s![start..end, ..]).to_owned(),
                targets: self.gen_targets.slice(ndarray::s![start..end, ..]).to_owned(),
                row_scale: ndarray::Array1::from_elem(end - start, T::of(1.0 / n_gen as f64)),
                generated_rows: end - start,
            };
            pose += model.loss(&batch)?.pose;
        }
        let mut co = 0.0;
        for start in (0..n_gt).step_by(CHUNK) {
            let end = (start + CHUNK).min(n_gt);
            let scale = (start..end)
                .map(|k| T::of(self.gt_weight(k, k % n_gen.max(1)) / n_gt as f64))
                .collect();
            let batch = LossBatch {
                inputs: self.gt_inputs.slice(ndarray::s![start..end, ..]).to_owned(),
                targets: self.gt_targets.slice(ndarray::s![start..end, ..]).to_owned(),
                row_scale: scale,
                generated_rows: 0,
            };
            let out = model.forward_batch(batch.inputs.view())?;
            co += batch_loss(&out.view(), &batch).counterfactual;
        }
        Ok(LossParts {
            pose,
            counterfactual: co,
        })
    }
}

/// Ground-truth rows are drawn from a reshuffled stream, as many per step as
/// the generated batch holds.
struct GtStream {
    order: Vec<usize>,
    pos: usize,
}

impl GtStream {
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Each step consumes one shuffled generated batch and an equally sized
/// ground-truth batch and takes one optimizer step on
/// `L_P + lambda_co * L_co`. The trace reports whole-set losses.
pub fn train_prepared<T: Real>(
    model: &mut EstimatorModel<T>,
    data: &PreparedData<T>,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    let n_gen = data.gen_inputs.nrows();
    let n_gt = data.gt_inputs.nrows();
    if n_gen == 0 {
        return Err(Error::Empty("generated training set"));
    }
    if n_gt == 0 && cfg.lambda_co > 0.0 {
        return Err(Error::Empty("ground-truth training sample"));
    }
    let lambda = cfg.lambda_co;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.parameters().len());
    let mut gt_stream = GtStream {
        order: (0..n_gt).collect(),
        pos: n_gt,
    };

    let mut trace = LossTrace::default();
    let record = |epoch: usize, model: &EstimatorModel<T>, trace: &mut LossTrace| -> Result<()> {
        let parts = data.evaluate(model)?;
        let total = parts.pose + lambda * parts.counterfactual;
        if !total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "loss",
            });
        }
        trace.rows.push(EpochLoss {
            epoch,
            pose: parts.pose,
            counterfactual: parts.counterfactual,
            total,
        });
        Ok(())
    };
    record(0, model, &mut trace)?;

    let mut order: Vec<usize> = (0..n_gen).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let gt_rows = if lambda > 0.0 {
                gt_stream.take(chunk.len(), &mut rng)
            } else {
                Vec::new()
            };
            let weights: Vec<f64> = gt_rows
                .iter()
                .zip(chunk)
                .map(|(&g, &p)| data.gt_weight(g, p))
                .collect();
            let gt_x = data.gt_inputs.select(Axis(0), &gt_rows);
            let gt_y = data.gt_targets.select(Axis(0), &gt_rows);
            let batch = LossBatch::new(
                (
                    data.gen_inputs.select(Axis(0), chunk).view(),
                    data.gen_targets.select(Axis(0), chunk).view(),
                ),
                (gt_x.view(), gt_y.view()),
                &weights,
                lambda,
            );
            let (_, grad) = model.loss_and_gradient(&batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::Divergence { epoch, what },
                other => other,
            })?;
            opt.step(model.parameters_mut(), &grad);
        }
        if model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                what: "parameters",
            });
        }
        record(epoch, model, &mut trace)?;
        log::debug!("epoch {epoch}: {:?}", trace.last());
    }
    Ok(trace)
}
