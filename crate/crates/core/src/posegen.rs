//! Pose-sequence generation: angle ranges from seed poses, random keyframes,
//! linear inter-frames, bone-length templates and whole-body rotation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{bone_rotation, forward_kinematics, inverse_kinematics_in, IkFrame};
use crate::skeleton::{AngleMatrix, BoneLengths, Pose3D, SkeletonTopology};

pub const DEFAULT_RANGE_PADDING: f64 = 0.05;

/// Per-bone, per-axis angle interval for one action, radians within `[0, pi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRangeProfile {
    pub action: String,
    pub min: Vec<[f64; 3]>,
    pub max: Vec<[f64; 3]>,
}

impl AngleRangeProfile {
    pub fn new(action: impl Into<String>, min: Vec<[f64; 3]>, max: Vec<[f64; 3]>) -> Result<Self> {
        let profile = Self {
            action: action.into(),
            min,
            max,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::DimensionMismatch {
                context: "angle range profile",
                expected: self.min.len(),
                actual: self.max.len(),
            });
        }
        for (b, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            for k in 0..3 {
                if !(0.0 <= lo[k] && lo[k] <= hi[k] && hi[k] <= PI) {
                    return Err(Error::InvalidValue(format!(
                        "action {:?} bone {b} axis {k}: bad interval [{}, {}]",
                        self.action, lo[k], hi[k]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn bone_count(&self) -> usize {
        self.min.len()
    }

    /// Whether every entry of `angles` falls inside this profile.
    pub fn contains(&self, angles: &AngleMatrix) -> bool {
        angles.len() == self.bone_count()
            && angles.rows().iter().enumerate().all(|(b, t)| {
                (0..3).all(|k| self.min[b][k] <= t[k] && t[k] <= self.max[b][k])
            })
    }
}

/// Bone-length templates taken from seed poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneLengthTemplateSet {
    templates: Vec<BoneLengthTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneLengthTemplate {
    pub action: String,
    pub lengths: BoneLengths,
}

impl BoneLengthTemplateSet {
    pub fn new(templates: Vec<BoneLengthTemplate>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Empty("bone length templates"));
        }
        Ok(Self { templates })
    }

    pub fn from_seeds(seeds: &[(Pose3D, String)], topo: &SkeletonTopology) -> Result<Self> {
        Self::new(
            seeds
                .iter()
                .map(|(pose, action)| {
                    Ok(BoneLengthTemplate {
                        action: action.clone(),
                        lengths: BoneLengths::of_pose(pose, topo)?,
                    })
                })
                .collect::<Result<_>>()?,
        )
    }

    pub fn templates(&self) -> &[BoneLengthTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Axis-aligned box the root joint is placed in, camera coordinates in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for RootBox {
    fn default() -> Self {
        Self {
            min: [-500.0, -500.0, 3000.0],
            max: [500.0, 500.0, 6000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Keyframes per sequence.
    pub keyframes: usize,
    /// Interpolated frames between consecutive keyframes.
    pub inter_frames: usize,
    pub sequences_per_action: usize,
    /// Per-action sequence counts overriding `sequences_per_action`.
    pub action_sequences: BTreeMap<String, usize>,
    /// `[min, max]` of the whole-body rotation angle about x, y and z, radians.
    pub global_rotation_range: [[f64; 2]; 3],
    pub root_box: RootBox,
    pub rng_seed: u64,
    pub seed_samples_per_action: usize,
    pub range_padding: f64,
    pub ik_frame: IkFrame,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            keyframes: 5,
            inter_frames: 10,
            sequences_per_action: 40,
            action_sequences: BTreeMap::new(),
            global_rotation_range: [[-0.2, 0.2], [-PI, PI], [-0.2, 0.2]],
            root_box: RootBox::default(),
            rng_seed: 0,
            seed_samples_per_action: 20,
            range_padding: DEFAULT_RANGE_PADDING,
            ik_frame: IkFrame::Parent,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keyframes < 2 {
            return Err(Error::config("generator.keyframes", "must be at least 2"));
        }
        if self.inter_frames < 1 {
            return Err(Error::config("generator.inter_frames", "must be at least 1"));
        }
        if self.seed_samples_per_action < 1 {
            return Err(Error::config(
                "generator.seed_samples_per_action",
                "must be at least 1",
            ));
        }
        if !(self.range_padding >= 0.0 && self.range_padding.is_finite()) {
            return Err(Error::config("generator.range_padding", "must be finite and >= 0"));
        }
        for (k, [lo, hi]) in self.global_rotation_range.iter().enumerate() {
            if !(-PI <= *lo && lo <= hi && *hi <= PI) {
                return Err(Error::config(
                    format!("generator.global_rotation_range[{k}]"),
                    format!("[{lo}, {hi}] is not an interval within [-pi, pi]"),
                ));
            }
        }
        for k in 0..3 {
            let (lo, hi) = (self.root_box.min[k], self.root_box.max[k]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(
                    format!("generator.root_box[{k}]"),
                    format!("[{lo}, {hi}] is not an interval"),
                ));
            }
        }
        Ok(())
    }

    /// Frames per sequence.
    pub fn frames_per_sequence(&self) -> usize {
        self.keyframes * self.inter_frames
    }

    pub fn sequences_for(&self, action: &str) -> usize {
        self.action_sequences
            .get(action)
            .copied()
            .unwrap_or(self.sequences_per_action)
    }
}

/// Per-action angle intervals: the extremes of the seeds' direction-cosine
/// angles, widened by `padding` and clamped to `[0, pi]`. Profiles come back
/// sorted by action label.
pub fn extract_ranges(
    seeds: &[(Pose3D, String)],
    topo: &SkeletonTopology,
    padding: f64,
    frame: IkFrame,
) -> Result<Vec<AngleRangeProfile>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed poses"));
    }
    let m = topo.bone_count();
    let mut acc: BTreeMap<&str, (Vec<[f64; 3]>, Vec<[f64; 3]>)> = BTreeMap::new();
    for (pose, action) in seeds {
        if action.is_empty() {
            return Err(Error::InvalidValue("seed with empty action label".into()));
        }
        let angles = inverse_kinematics_in(pose, topo, frame)?;
        let (lo, hi) = acc
            .entry(action.as_str())
            .or_insert_with(|| (vec![[f64::INFINITY; 3]; m], vec![[f64::NEG_INFINITY; 3]; m]));
        for (b, t) in angles.rows().iter().enumerate() {
            for k in 0..3 {
                lo[b][k] = lo[b][k].min(t[k]);
                hi[b][k] = hi[b][k].max(t[k]);
            }
        }
    }
    acc.into_iter()
        .map(|(action, (mut lo, mut hi))| {
            for b in 0..m {
                for k in 0..3 {
                    lo[b][k] = (lo[b][k] - padding).max(0.0);
                    hi[b][k] = (hi[b][k] + padding).min(PI);
                }
            }
            AngleRangeProfile::new(action, lo, hi)
        })
        .collect()
}

/// Picks up to `per_action` seeds per action uniformly without replacement.
/// Indices are returned in ascending order.
pub fn select_seeds<R: Rng>(actions: &[String], per_action: usize, rng: &mut R) -> Vec<usize> {
    let mut by_action: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in actions.iter().enumerate() {
        by_action.entry(a.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for members in by_action.values() {
        let take = per_action.min(members.len());
        out.extend(index::sample(rng, members.len(), take).iter().map(|k| members[k]));
    }
    out.sort_unstable();
    out
}

fn sample_angle<R: Rng>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// `count` angle matrices with every entry uniform in its profile interval.
pub fn sample_keyframes<R: Rng>(
    profile: &AngleRangeProfile,
    count: usize,
    rng: &mut R,
) -> Vec<AngleMatrix> {
    (0..count)
        .map(|_| {
            AngleMatrix::from_trusted(
                profile
                    .min
                    .iter()
                    .zip(&profile.max)
                    .map(|(lo, hi)| {
                        [
                            sample_angle(lo[0], hi[0], rng),
                            sample_angle(lo[1], hi[1], rng),
                            sample_angle(lo[2], hi[2], rng),
                        ]
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Frames `n = 1..=count` of `prev + n * (next - prev) / count`; the last equals `next`.
pub fn interpolate(prev: &AngleMatrix, next: &AngleMatrix, count: usize) -> Vec<AngleMatrix> {
    assert_eq!(prev.len(), next.len(), "interpolating matrices of different size");
    (1..=count)
        .map(|n| {
            if n == count {
                return next.clone();
            }
            AngleMatrix::from_trusted(
                prev.rows()
                    .iter()
                    .zip(next.rows())
                    .map(|(a, b)| {
                        let mut t = [0.0; 3];
                        for k in 0..3 {
                            t[k] = a[k] + n as f64 * (b[k] - a[k]) / count as f64;
                        }
                        t
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Rigidly rotates every joint about the root joint by `bone_rotation(triple)`.
pub fn global_rotation(pose: &Pose3D, triple: [f64; 3], topo: &SkeletonTopology) -> Pose3D {
    let r = bone_rotation(triple);
    let root = pose.joint(topo.root());
    pose.map(|j| root + r.apply(&(j - root)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFrame {
    pub pose: Pose3D,
    pub angles: AngleMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub sequence_id: usize,
    pub action: String,
    pub template: usize,
    pub root: Vector3<f64>,
    pub global_rotation: [f64; 3],
    pub keyframes: Vec<AngleMatrix>,
    pub frames: Vec<GeneratedFrame>,
}

/// Random stream for one sequence, independent of every other sequence.
pub fn sequence_rng(seed: u64, sequence: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sequence as u64);
    rng
}

/// Builds the synthetic training set.
///
/// Each sequence samples `T` keyframes and fills every keyframe slot with `N`
/// interpolated frames, closing the loop from the last keyframe back to the
/// first, so a sequence holds `K = N * T` frames and ends on its final keyframe.
/// Bone-length template, root position and whole-body rotation are drawn once
/// per sequence. Sequences are numbered across actions in label order.
pub fn generate_dataset(
    profiles: &[AngleRangeProfile],
    templates: &BoneLengthTemplateSet,
    cfg: &GeneratorConfig,
    topo: &SkeletonTopology,
) -> Result<Vec<GeneratedSequence>> {
    cfg.validate()?;
    if profiles.is_empty() {
        return Err(Error::Empty("angle range profiles"));
    }
    if templates.is_empty() {
        return Err(Error::Empty("bone length templates"));
    }
    for p in profiles {
        p.validate()?;
        topo.check_bones("angle range profile", p.bone_count())?;
    }
    for t in templates.templates() {
        topo.check_bones("bone length template", t.lengths.len())?;
    }

    let mut plan = Vec::new();
    for profile in profiles {
        for _ in 0..cfg.sequences_for(&profile.action) {
            plan.push(profile);
        }
    }

    plan.par_iter()
        .enumerate()
        .map(|(sequence_id, profile)| {
            generate_sequence(sequence_id, profile, templates, cfg, topo)
        })
        .collect()
}

fn generate_sequence(
    sequence_id: usize,
    profile: &AngleRangeProfile,
    templates: &BoneLengthTemplateSet,
    cfg: &GeneratorConfig,
    topo: &SkeletonTopology,
) -> Result<GeneratedSequence> {
    let mut rng = sequence_rng(cfg.rng_seed, sequence_id);
    let template = rng.random_range(0..templates.len());
    let mut root = Vector3::zeros();
    for k in 0..3 {
        root[k] = sample_angle(cfg.root_box.min[k], cfg.root_box.max[k], &mut rng);
    }
    let mut rotation = [0.0; 3];
    for (k, [lo, hi]) in cfg.global_rotation_range.iter().enumerate() {
        rotation[k] = sample_angle(*lo, *hi, &mut rng);
    }
    let keyframes = sample_keyframes(profile, cfg.keyframes, &mut rng);

    let lengths = &templates.templates()[template].lengths;
    let mut frames = Vec::with_capacity(cfg.frames_per_sequence());
    for t in 0..keyframes.len() {
        let prev = &keyframes[(t + keyframes.len() - 1) % keyframes.len()];
        for angles in interpolate(prev, &keyframes[t], cfg.inter_frames) {
            let pose = forward_kinematics(&angles, lengths, root, topo)?;
            frames.push(GeneratedFrame {
                pose: global_rotation(&pose, rotation, topo),
                angles,
            });
        }
    }
    Ok(GeneratedSequence {
        sequence_id,
        action: profile.action.clone(),
        template,
        root,
        global_rotation: rotation,
        keyframes,
        frames,
    })
}
