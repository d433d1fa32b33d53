//! Reference 2D-to-3D lifting network, its optimizer and the training loop
//! combining the generated-set loss with the weighted ground-truth loss.
//!
//! Network inputs are 2D joints normalized by [`InputNormalizer`], flattened
//! joint-major as `[u0, v0, u1, v1, ...]`; outputs are root-relative 3D joints
//! in millimetres flattened as `[x0, y0, z0, x1, ...]`.

mod checkpoint;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{
    batch_loss, Activation, Architecture, EstimatorModel, ForwardCache, LossBatch, LossParts, Real,
};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{
    prepare, train, train_prepared, EpochLoss, LossTrace, Precision, PreparedData, TrainConfig,
};

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PosePair};
use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, Pose3D};

/// Maps pixels to roughly `[-1, 1]`: `(u - cx) / (fx * k)`, `(v - cy) / (fy * k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNormalizer {
    pub camera: CameraIntrinsics,
    pub k: f64,
}

impl InputNormalizer {
    /// `k` chosen so the image corners land on ±1 along the wider axis.
    pub fn for_camera(camera: CameraIntrinsics) -> Self {
        let k = 0.5 * (camera.width / camera.fx).max(camera.height / camera.fy);
        Self { camera, k }
    }

    pub fn normalize_point(&self, p: &Vector2<f64>) -> [f64; 2] {
        [
            (p.x - self.camera.cx) / (self.camera.fx * self.k),
            (p.y - self.camera.cy) / (self.camera.fy * self.k),
        ]
    }

    pub fn normalize(&self, pose: &Pose2D) -> Vec<f64> {
        pose.joints()
            .iter()
            .flat_map(|p| self.normalize_point(p))
            .collect()
    }

    pub fn denormalize(&self, flat: &[f64]) -> Result<Pose2D> {
        if flat.len() % 2 != 0 {
            return Err(Error::InvalidValue("odd-length normalized pose".into()));
        }
        Pose2D::new(
            flat.chunks(2)
                .map(|c| {
                    Vector2::new(
                        c[0] * self.camera.fx * self.k + self.camera.cx,
                        c[1] * self.camera.fy * self.k + self.camera.cy,
                    )
                })
                .collect(),
        )
    }
}

pub fn normalize_input(pose: &Pose2D, camera: &CameraIntrinsics) -> Vec<f64> {
    InputNormalizer::for_camera(*camera).normalize(pose)
}

pub(crate) fn input_matrix<T: Real>(normalizer: &InputNormalizer, poses: &[&Pose2D], joints: usize) -> Result<Array2<T>> {
    let mut m = Array2::zeros((poses.len(), 2 * joints));
    for (i, p) in poses.iter().enumerate() {
        if p.len() != joints {
            return Err(Error::DimensionMismatch {
                context: "estimator input joints",
                expected: joints,
                actual: p.len(),
            });
        }
        for (k, v) in normalizer.normalize(p).into_iter().enumerate() {
            m[[i, k]] = T::of(v);
        }
    }
    Ok(m)
}

pub(crate) fn target_matrix<T: Real>(pairs: &[PosePair], joints: usize) -> Result<Array2<T>> {
    let mut m = Array2::zeros((pairs.len(), 3 * joints));
    for (i, p) in pairs.iter().enumerate() {
        if p.target.len() != joints {
            return Err(Error::DimensionMismatch {
                context: "estimator target joints",
                expected: joints,
                actual: p.target.len(),
            });
        }
        for (j, q) in p.target.joints().iter().enumerate() {
            for k in 0..3 {
                m[[i, 3 * j + k]] = T::of(q[k]);
            }
        }
    }
    Ok(m)
}

/// Root-relative 3D predictions for a set of 2D poses.
pub fn predict<T: Real>(
    model: &EstimatorModel<T>,
    normalizer: &InputNormalizer,
    inputs: &[Pose2D],
) -> Result<Vec<Pose3D>> {
    let joints = model.architecture().joints;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(4096) {
        let refs: Vec<&Pose2D> = chunk.iter().collect();
        let x = input_matrix::<T>(normalizer, &refs, joints)?;
        let y = model.forward_batch(x.view())?;
        for row in y.outer_iter() {
            let joints = row
                .as_slice()
                .expect("contiguous rows")
                .chunks(3)
                .map(|c| Vector3::new(c[0].as_f64(), c[1].as_f64(), c[2].as_f64()))
                .collect();
            out.push(Pose3D::new(joints)?);
        }
    }
    Ok(out)
}
