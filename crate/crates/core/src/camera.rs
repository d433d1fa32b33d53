//! Pinhole projection of camera-space poses to the image plane.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, Pose3D, SkeletonTopology};

/// Focal lengths, principal point and image size, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 1150.0,
            fy: 1150.0,
            cx: 500.0,
            cy: 500.0,
            width: 1000.0,
            height: 1000.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::config("camera.fx", "must be positive"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::config("camera.fy", "must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width) {
            return Err(Error::config("camera.cx", "must lie inside (0, width)"));
        }
        if !(self.cy > 0.0 && self.cy < self.height) {
            return Err(Error::config("camera.cy", "must lie inside (0, height)"));
        }
        Ok(())
    }
}

/// `u = fx * x / z + cx`, `v = fy * y / z + cy` for every joint.
pub fn project(pose: &Pose3D, cam: &CameraIntrinsics) -> Result<Pose2D> {
    let joints = pose
        .joints()
        .iter()
        .enumerate()
        .map(|(joint, p)| {
            if !(p.z > 0.0) {
                return Err(Error::DegenerateProjection { joint, depth: p.z });
            }
            Ok(Vector2::new(
                cam.fx * p.x / p.z + cam.cx,
                cam.fy * p.y / p.z + cam.cy,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Pose2D::new(joints)
}

/// A 2D input in absolute pixels with its root-relative 3D target in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePair {
    pub input: Pose2D,
    pub target: Pose3D,
}

pub fn make_pair(pose: &Pose3D, cam: &CameraIntrinsics, topo: &SkeletonTopology) -> Result<PosePair> {
    topo.check_joints("pose joints", pose.len())?;
    Ok(PosePair {
        input: project(pose, cam)?,
        target: pose.root_relative(topo.root()),
    })
}

pub fn make_pairs(
    frames: &[Pose3D],
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
) -> Result<Vec<PosePair>> {
    frames.iter().map(|f| make_pair(f, cam, topo)).collect()
}
