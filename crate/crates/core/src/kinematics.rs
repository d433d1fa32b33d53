//! Forward kinematics from per-bone rotation angles and inverse kinematics to
//! per-bone direction-cosine angles.
//!
//! A bone's rotation is the intrinsic product `Rx(ax) * Ry(ay) * Rz(az)`. The
//! transform applied to a bone is the left-to-right product of the rotations of
//! every bone on the path from the root out to it, so children follow their parents.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{assemble_pose, bones_of, AngleMatrix, BoneLengths, Pose3D, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Proper rotation (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, rhs: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix(self.0.transpose())
    }

    /// Largest entry of `R Rᵀ - I` and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let gram = self.0 * self.0.transpose() - Matrix3::identity();
        (gram.amax(), (self.0.determinant() - 1.0).abs())
    }

    /// Smallest rotation taking unit vector `from` onto unit vector `to`.
    pub fn between(from: &Vector3<f64>, to: &Vector3<f64>) -> Self {
        let cross = from.cross(to);
        let sin = cross.norm();
        let cos = from.dot(to);
        if sin < 1e-12 {
            if cos > 0.0 {
                return Self::identity();
            }
            // Half turn about any axis perpendicular to `from`.
            let helper = if from.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let axis = from.cross(&helper).normalize();
            return Self(2.0 * axis * axis.transpose() - Matrix3::identity());
        }
        let k = cross.cross_matrix();
        Self(Matrix3::identity() + k + k * k * ((1.0 - cos) / (sin * sin)))
    }
}

/// Accumulated rotation of a serial chain of bones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainTransform(RotationMatrix);

impl ChainTransform {
    pub fn rotation(&self) -> &RotationMatrix {
        &self.0
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        self.0.matrix()
    }
}

fn elementary(axis: Axis, angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    RotationMatrix(match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    })
}

/// Right-handed rotation by `angle` radians about a camera axis.
pub fn axis_rotation(axis: Axis, angle: f64) -> Result<RotationMatrix> {
    if !angle.is_finite() {
        return Err(Error::NonFinite("rotation angle"));
    }
    Ok(elementary(axis, angle))
}

/// `Rx(ax) * Ry(ay) * Rz(az)`.
pub fn bone_rotation(triple: [f64; 3]) -> RotationMatrix {
    elementary(Axis::X, triple[0])
        .compose(&elementary(Axis::Y, triple[1]))
        .compose(&elementary(Axis::Z, triple[2]))
}

/// `V1 * V2 * ... * Vn` for angle triples listed root-outward.
pub fn chain_transform(triples: &[[f64; 3]]) -> Result<ChainTransform> {
    let (first, rest) = triples
        .split_first()
        .ok_or(Error::Empty("kinematic chain"))?;
    let acc = rest
        .iter()
        .fold(bone_rotation(*first), |acc, t| acc.compose(&bone_rotation(*t)));
    Ok(ChainTransform(acc))
}

/// Per-bone chain transforms for a whole skeleton, computed in one root-outward pass.
pub fn skeleton_transforms(
    angles: &AngleMatrix,
    topo: &SkeletonTopology,
) -> Result<Vec<ChainTransform>> {
    topo.check_bones("angle matrix", angles.len())?;
    let mut out = vec![ChainTransform(RotationMatrix::identity()); topo.bone_count()];
    for &b in topo.bone_order() {
        let local = bone_rotation(angles.get(b));
        out[b] = ChainTransform(match topo.parent_bone(b) {
            Some(p) => out[p].0.compose(&local),
            None => local,
        });
    }
    Ok(out)
}

/// Joint positions produced by rotating the rest-pose bones, scaled to `lengths`,
/// through their chain transforms and stacking them from `root`.
pub fn forward_kinematics(
    angles: &AngleMatrix,
    lengths: &BoneLengths,
    root: Vector3<f64>,
    topo: &SkeletonTopology,
) -> Result<Pose3D> {
    topo.check_bones("bone lengths", lengths.len())?;
    if root.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("root position"));
    }
    let transforms = skeleton_transforms(angles, topo)?;
    let bones: Vec<_> = transforms
        .iter()
        .enumerate()
        .map(|(b, t)| t.0.apply(&(topo.rest_direction(b) * lengths.as_slice()[b])))
        .collect();
    assemble_pose(&bones, root, topo)
}

/// Frame in which bone components are measured before taking direction cosines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IkFrame {
    /// Camera axes rotated by the estimated orientation of the parent chain.
    #[default]
    Parent,
    /// Camera axes for every bone.
    Camera,
}

/// Direction-cosine angles `(acos(vx/|b|), acos(vy/|b|), acos(vz/|b|))` of every bone.
///
/// With [`IkFrame::Parent`], each bone is measured in the frame of its parent
/// chain. Since a pose only fixes bone directions, each link's orientation is
/// taken as the smallest rotation carrying its rest direction onto the observed
/// direction, and frames are accumulated root-outward. Bones leaving the root
/// are measured in camera axes. The result regulates sampling ranges; it is not
/// an inverse of [`forward_kinematics`].
pub fn inverse_kinematics_in(
    pose: &Pose3D,
    topo: &SkeletonTopology,
    frame: IkFrame,
) -> Result<AngleMatrix> {
    let bones = bones_of(pose, topo)?;
    let mut frames = vec![RotationMatrix::identity(); topo.bone_count()];
    let mut angles = vec![[0.0; 3]; topo.bone_count()];
    for &b in topo.bone_order() {
        let len = bones[b].norm();
        if !(len > 0.0) {
            return Err(Error::DegenerateBone { bone: b });
        }
        let parent_frame = match (frame, topo.parent_bone(b)) {
            (IkFrame::Parent, Some(p)) => frames[p],
            _ => RotationMatrix::identity(),
        };
        let local = parent_frame.transpose().apply(&bones[b]) / len;
        angles[b] = [
            local.x.clamp(-1.0, 1.0).acos(),
            local.y.clamp(-1.0, 1.0).acos(),
            local.z.clamp(-1.0, 1.0).acos(),
        ];
        frames[b] = parent_frame.compose(&RotationMatrix::between(&topo.rest_direction(b), &local));
    }
    debug_assert!(angles.iter().flatten().all(|a| (0.0..=PI).contains(a)));
    Ok(AngleMatrix::from_trusted(angles))
}

pub fn inverse_kinematics(pose: &Pose3D, topo: &SkeletonTopology) -> Result<AngleMatrix> {
    inverse_kinematics_in(pose, topo, IkFrame::Parent)
}
