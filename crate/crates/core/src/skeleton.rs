//! Skeletal data model: joint topology, poses, bone lengths and angle matrices.
//!
//! Bones are indexed by their child joint: walking the joints in index order and
//! skipping the root gives bone 0, 1, ... `M - 1`. Camera coordinates follow the
//! usual pinhole convention (x right, y down, z forward), in millimetres.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const UNIT_NORM_TOL: f64 = 1e-12;

/// Upper sanity bound for a single human bone, in millimetres.
pub const MAX_BONE_LENGTH_MM: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
}

/// Joint/bone tree with parent indices and rest-pose unit bone directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_directions: Vec<Vector3<f64>>,
    root: usize,
    bones: Vec<Bone>,
    bone_of_joint: Vec<Option<usize>>,
    parent_bone: Vec<Option<usize>>,
    bone_order: Vec<usize>,
}

/// On-disk form of a topology.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TopologyDoc {
    joints: Vec<String>,
    parents: Vec<i64>,
    rest_directions: Vec<[f64; 3]>,
    root: usize,
}

impl SkeletonTopology {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_directions: Vec<Vector3<f64>>,
        root: usize,
    ) -> Result<Self> {
        let j = joint_names.len();
        if j < 2 {
            return Err(Error::InvalidTopology(format!(
                "need at least two joints, got {j}"
            )));
        }
        if parents.len() != j {
            return Err(Error::DimensionMismatch {
                context: "topology parents",
                expected: j,
                actual: parents.len(),
            });
        }
        if rest_directions.len() != j - 1 {
            return Err(Error::DimensionMismatch {
                context: "topology rest directions",
                expected: j - 1,
                actual: rest_directions.len(),
            });
        }
        if root >= j {
            return Err(Error::InvalidTopology(format!(
                "root index {root} out of range"
            )));
        }
        for (joint, parent) in parents.iter().enumerate() {
            match parent {
                None if joint != root => {
                    return Err(Error::InvalidTopology(format!(
                        "joint {joint} has no parent but is not the root"
                    )))
                }
                Some(_) if joint == root => {
                    return Err(Error::InvalidTopology("root joint has a parent".into()))
                }
                Some(p) if *p >= j => {
                    return Err(Error::InvalidTopology(format!(
                        "joint {joint} has out-of-range parent {p}"
                    )))
                }
                _ => {}
            }
        }
        for (i, d) in rest_directions.iter().enumerate() {
            if !d.iter().all(|c| c.is_finite()) || (d.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidTopology(format!(
                    "rest direction of bone {i} is not a unit vector (norm {})",
                    d.norm()
                )));
            }
        }

        let mut bones = Vec::with_capacity(j - 1);
        let mut bone_of_joint = vec![None; j];
        for (child, parent) in parents.iter().enumerate() {
            if let Some(parent) = *parent {
                bone_of_joint[child] = Some(bones.len());
                bones.push(Bone { parent, child });
            }
        }

        // Breadth-first walk from the root; anything unreached sits on a cycle.
        let mut children = vec![Vec::new(); j];
        for (b, bone) in bones.iter().enumerate() {
            children[bone.parent].push(b);
        }
        let mut bone_order = Vec::with_capacity(bones.len());
        let mut queue = VecDeque::from([root]);
        while let Some(joint) = queue.pop_front() {
            for &b in &children[joint] {
                bone_order.push(b);
                queue.push_back(bones[b].child);
            }
        }
        if bone_order.len() != bones.len() {
            return Err(Error::InvalidTopology(
                "parent indices do not form a tree rooted at the root joint".into(),
            ));
        }
        let parent_bone = bones.iter().map(|b| bone_of_joint[b.parent]).collect();

        Ok(Self {
            joint_names,
            parents,
            rest_directions,
            root,
            bones,
            bone_of_joint,
            parent_bone,
            bone_order,
        })
    }

    /// The 17-joint layout used by Human3.6M-style datasets, pelvis at the root,
    /// standing upright facing the camera with arms at the sides.
    pub fn human36m() -> Self {
        let names = [
            "pelvis",
            "right_hip",
            "right_knee",
            "right_ankle",
            "left_hip",
            "left_knee",
            "left_ankle",
            "spine",
            "thorax",
            "neck",
            "head",
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
        ];
        let parents = [
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(0),
            Some(4),
            Some(5),
            Some(0),
            Some(7),
            Some(8),
            Some(9),
            Some(8),
            Some(11),
            Some(12),
            Some(8),
            Some(14),
            Some(15),
        ];
        let up = Vector3::new(0.0, -1.0, 0.0);
        let down = Vector3::new(0.0, 1.0, 0.0);
        // The subject faces the camera, so their right side is at negative x.
        let to_right = Vector3::new(-1.0, 0.0, 0.0);
        let to_left = Vector3::new(1.0, 0.0, 0.0);
        let rest = vec![
            to_right, down, down, // right leg
            to_left, down, down, // left leg
            up, up, up, up, // spine, thorax, neck, head
            to_left, down, down, // left arm
            to_right, down, down, // right arm
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            parents.to_vec(),
            rest,
            0,
        )
        .expect("built-in topology is valid")
    }

    /// Bone lengths of an average adult for [`SkeletonTopology::human36m`], in millimetres.
    pub fn human36m_reference_lengths() -> BoneLengths {
        BoneLengths(vec![
            132.0, 442.0, 454.0, // right leg
            132.0, 442.0, 454.0, // left leg
            233.0, 257.0, 121.0, 115.0, // spine to head
            151.0, 278.0, 251.0, // left arm
            151.0, 278.0, 251.0, // right arm
        ])
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn rest_direction(&self, bone: usize) -> Vector3<f64> {
        self.rest_directions[bone]
    }

    pub fn rest_directions(&self) -> &[Vector3<f64>] {
        &self.rest_directions
    }

    /// Bone ending at `joint`, `None` for the root.
    pub fn bone_of_joint(&self, joint: usize) -> Option<usize> {
        self.bone_of_joint[joint]
    }

    /// The bone that `bone` hangs from, `None` when it starts at the root.
    pub fn parent_bone(&self, bone: usize) -> Option<usize> {
        self.parent_bone[bone]
    }

    /// Bone indices ordered so every bone comes after its parent bone.
    pub fn bone_order(&self) -> &[usize] {
        &self.bone_order
    }

    /// Bones from the root out to `bone`, inclusive.
    pub fn chain_to(&self, bone: usize) -> Vec<usize> {
        let mut chain = vec![bone];
        let mut cur = bone;
        while let Some(p) = self.parent_bone[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    fn to_doc(&self) -> TopologyDoc {
        TopologyDoc {
            joints: self.joint_names.clone(),
            parents: self
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            rest_directions: self.rest_directions.iter().map(|d| [d.x, d.y, d.z]).collect(),
            root: self.root,
        }
    }

    fn from_doc(doc: TopologyDoc) -> Result<Self> {
        let parents = doc
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::InvalidTopology(format!("invalid parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let dirs = doc
            .rest_directions
            .iter()
            .map(|d| Vector3::new(d[0], d[1], d[2]))
            .collect();
        Self::new(doc.joints, parents, dirs, doc.root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("topology serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    /// Short content hash identifying this topology inside artifact files.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&self.to_doc()).expect("topology serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hex::encode(&hash[..8])
    }

    pub(crate) fn check_joints(&self, context: &'static str, n: usize) -> Result<()> {
        if n != self.joint_count() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.joint_count(),
                actual: n,
            });
        }
        Ok(())
    }

    pub(crate) fn check_bones(&self, context: &'static str, n: usize) -> Result<()> {
        if n != self.bone_count() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.bone_count(),
                actual: n,
            });
        }
        Ok(())
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::human36m()
    }
}

impl Serialize for SkeletonTopology {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SkeletonTopology {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = TopologyDoc::deserialize(d)?;
        Self::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

/// 3D joint positions in camera coordinates, millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D {
    joints: Vec<Vector3<f64>>,
}

impl Pose3D {
    pub fn new(joints: Vec<Vector3<f64>>) -> Result<Self> {
        if joints.iter().flat_map(|j| j.iter()).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("3D pose"));
        }
        Ok(Self { joints })
    }

    pub(crate) fn from_trusted(joints: Vec<Vector3<f64>>) -> Self {
        Self { joints }
    }

    pub fn joints(&self) -> &[Vector3<f64>] {
        &self.joints
    }

    pub fn joint(&self, i: usize) -> Vector3<f64> {
        self.joints[i]
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        Self::from_trusted(self.joints.iter().map(|j| j + offset).collect())
    }

    /// The same pose with joint `root` moved to the origin.
    pub fn root_relative(&self, root: usize) -> Self {
        self.translated(-self.joints[root])
    }

    pub fn map(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Self {
        Self::from_trusted(self.joints.iter().map(f).collect())
    }
}

/// 2D joint positions on the image plane, pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose2D {
    joints: Vec<Vector2<f64>>,
}

impl Pose2D {
    pub fn new(joints: Vec<Vector2<f64>>) -> Result<Self> {
        if joints.iter().flat_map(|j| j.iter()).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("2D pose"));
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[Vector2<f64>] {
        &self.joints
    }

    pub fn joint(&self, i: usize) -> Vector2<f64> {
        self.joints[i]
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// Per-bone lengths in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BoneLengths(Vec<f64>);

impl BoneLengths {
    pub fn new(lengths: Vec<f64>) -> Result<Self> {
        for (i, &l) in lengths.iter().enumerate() {
            if !(l > 0.0 && l < MAX_BONE_LENGTH_MM) {
                return Err(Error::InvalidValue(format!(
                    "bone {i} length {l} mm outside (0, {MAX_BONE_LENGTH_MM})"
                )));
            }
        }
        Ok(Self(lengths))
    }

    /// Lengths of the bones of `pose`.
    pub fn of_pose(pose: &Pose3D, topo: &SkeletonTopology) -> Result<Self> {
        let bones = bones_of(pose, topo)?;
        Self::new(bones.iter().map(|b| b.norm()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for BoneLengths {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BoneLengths> for Vec<f64> {
    fn from(l: BoneLengths) -> Self {
        l.0
    }
}

/// One (x, y, z) rotation angle triple per bone, radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct AngleMatrix(Vec<[f64; 3]>);

impl AngleMatrix {
    pub fn new(angles: Vec<[f64; 3]>) -> Result<Self> {
        for (i, triple) in angles.iter().enumerate() {
            for &a in triple {
                if !a.is_finite() {
                    return Err(Error::NonFinite("angle matrix"));
                }
                if !(-PI..=PI).contains(&a) {
                    return Err(Error::InvalidValue(format!(
                        "bone {i} angle {a} rad outside [-pi, pi]"
                    )));
                }
            }
        }
        Ok(Self(angles))
    }

    pub fn zeros(bones: usize) -> Self {
        Self(vec![[0.0; 3]; bones])
    }

    pub(crate) fn from_trusted(angles: Vec<[f64; 3]>) -> Self {
        Self(angles)
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn get(&self, bone: usize) -> [f64; 3] {
        self.0[bone]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<[f64; 3]>> for AngleMatrix {
    type Error = Error;
    fn try_from(v: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AngleMatrix> for Vec<[f64; 3]> {
    fn from(a: AngleMatrix) -> Self {
        a.0
    }
}

/// Bone vectors (child minus parent joint), in bone index order.
pub fn bones_of(pose: &Pose3D, topo: &SkeletonTopology) -> Result<Vec<Vector3<f64>>> {
    topo.check_joints("pose joints", pose.len())?;
    Ok(topo
        .bones()
        .iter()
        .map(|b| pose.joint(b.child) - pose.joint(b.parent))
        .collect())
}

/// Rebuilds joint positions from bone vectors and a root position.
pub fn assemble_pose(
    bones: &[Vector3<f64>],
    root: Vector3<f64>,
    topo: &SkeletonTopology,
) -> Result<Pose3D> {
    topo.check_bones("bone vectors", bones.len())?;
    if bones.iter().flat_map(|b| b.iter()).any(|c| !c.is_finite())
        || root.iter().any(|c| !c.is_finite())
    {
        return Err(Error::NonFinite("bone vectors"));
    }
    let mut joints = vec![Vector3::zeros(); topo.joint_count()];
    joints[topo.root()] = root;
    for &b in topo.bone_order() {
        let bone = topo.bones()[b];
        joints[bone.child] = joints[bone.parent] + bones[b];
    }
    Ok(Pose3D::from_trusted(joints))
}

/// Rest pose scaled by `lengths` with its root at `root`.
pub fn rest_pose(
    lengths: &BoneLengths,
    root: Vector3<f64>,
    topo: &SkeletonTopology,
) -> Result<Pose3D> {
    topo.check_bones("bone lengths", lengths.len())?;
    let bones: Vec<_> = topo
        .rest_directions()
        .iter()
        .zip(lengths.as_slice())
        .map(|(d, l)| d * *l)
        .collect();
    assemble_pose(&bones, root, topo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_joint() -> SkeletonTopology {
        SkeletonTopology::new(
            vec!["a".into(), "b".into()],
            vec![None, Some(0)],
            vec![Vector3::new(0.0, 0.0, 1.0)],
            0,
        )
        .unwrap()
    }

    fn chain(n_bones: usize) -> SkeletonTopology {
        SkeletonTopology::new(
            (0..=n_bones).map(|i| format!("j{i}")).collect(),
            (0..=n_bones).map(|i| i.checked_sub(1)).collect(),
            vec![Vector3::new(1.0, 0.0, 0.0); n_bones],
            0,
        )
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> Pose3D {
        Pose3D::new(
            (0..j)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-800.0..800.0),
                        rng.random_range(-800.0..800.0),
                        rng.random_range(3000.0..5000.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_topology_is_valid() {
        let t = SkeletonTopology::human36m();
        assert_eq!(t.joint_count(), 17);
        assert_eq!(t.bone_count(), 16);
        assert_eq!(t.root(), 0);
        for d in t.rest_directions() {
            assert!((d.norm() - 1.0).abs() <= 1e-12);
        }
        let again = SkeletonTopology::from_json(&t.to_json()).unwrap();
        assert_eq!(again, t);
        assert_eq!(again.digest(), t.digest());
        SkeletonTopology::human36m_reference_lengths();
    }

    #[test]
    fn rejects_cycles_and_bad_directions() {
        let cyclic = SkeletonTopology::new(
            vec!["r".into(), "a".into(), "b".into()],
            vec![None, Some(2), Some(1)],
            vec![Vector3::x(), Vector3::y()],
            0,
        );
        assert!(matches!(cyclic, Err(Error::InvalidTopology(_))));
        let non_unit = SkeletonTopology::new(
            vec!["r".into(), "a".into()],
            vec![None, Some(0)],
            vec![Vector3::new(1.0, 1e-5, 0.0)],
            0,
        );
        assert!(non_unit.is_err());
        let two_roots = SkeletonTopology::new(
            vec!["r".into(), "a".into(), "b".into()],
            vec![None, None, Some(0)],
            vec![Vector3::x(), Vector3::y()],
            0,
        );
        assert!(two_roots.is_err());
    }

    #[test]
    fn two_joint_bone() {
        let topo = two_joint();
        let pose = Pose3D::new(vec![Vector3::zeros(), Vector3::new(0.0, 0.0, 100.0)]).unwrap();
        assert_eq!(bones_of(&pose, &topo).unwrap(), vec![Vector3::new(0.0, 0.0, 100.0)]);
        let rebuilt =
            assemble_pose(&[Vector3::new(0.0, 0.0, 100.0)], Vector3::zeros(), &topo).unwrap();
        assert_eq!(rebuilt, pose);
    }

    #[test]
    fn rest_pose_bones_are_scaled_directions() {
        let topo = SkeletonTopology::human36m();
        let lengths = SkeletonTopology::human36m_reference_lengths();
        let pose = rest_pose(&lengths, Vector3::new(10.0, -20.0, 4000.0), &topo).unwrap();
        for (i, b) in bones_of(&pose, &topo).unwrap().iter().enumerate() {
            let expected = topo.rest_direction(i) * lengths.as_slice()[i];
            assert!((b - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn bones_match_pairwise_subtraction() {
        let topo = SkeletonTopology::human36m();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng, 17);
        let bones = bones_of(&pose, &topo).unwrap();
        // Independent oracle: walk the parent table directly.
        let mut k = 0;
        for joint in 0..17 {
            if let Some(p) = topo.parent(joint) {
                for axis in 0..3 {
                    assert_eq!(bones[k][axis], pose.joints()[joint][axis] - pose.joints()[p][axis]);
                }
                k += 1;
            }
        }
        assert_eq!(k, 16);
    }

    #[test]
    fn chain_joints_are_prefix_sums() {
        let topo = chain(5);
        let bones: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64 + 1.0, 2.0 * i as f64, -(i as f64)))
            .collect();
        let pose = assemble_pose(&bones, Vector3::zeros(), &topo).unwrap();
        let mut acc = Vector3::zeros();
        for k in 0..5 {
            acc += bones[k];
            assert_eq!(pose.joint(k + 1), acc);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let topo = SkeletonTopology::human36m();
        let pose = Pose3D::new(vec![Vector3::zeros(); 3]).unwrap();
        assert!(matches!(
            bones_of(&pose, &topo),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(BoneLengths::new(vec![100.0, 0.0]).is_err());
        assert!(BoneLengths::new(vec![1000.0]).is_err());
        assert!(AngleMatrix::new(vec![[0.0, 4.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn bones_and_assembly_are_inverse(seed in any::<u64>()) {
            let topo = SkeletonTopology::human36m();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&mut rng, 17);
            let bones = bones_of(&pose, &topo).unwrap();
            let rebuilt = assemble_pose(&bones, pose.joint(0), &topo).unwrap();
            for (a, b) in rebuilt.joints().iter().zip(pose.joints()) {
                prop_assert!((a - b).norm() <= 1e-9);
            }
            prop_assert_eq!(bones_of(&rebuilt, &topo).unwrap().len(), 16);
        }
    }
}
