//! A license-free stand-in for a motion-capture corpus: two action archetypes
//! posed by FK give the seed poses; a generated set with a skewed action mix
//! is drawn from one half of the seeds and a balanced "ground truth" and test
//! set from the other half.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::forward_kinematics;
use crate::posegen::{
    extract_ranges, generate_dataset, AngleRangeProfile, BoneLengthTemplateSet, GeneratedSequence,
    GeneratorConfig, RootBox,
};
use crate::skeleton::{AngleMatrix, BoneLengths, Pose3D, SkeletonTopology};

pub const MAJORITY_ACTION: &str = "stand";
pub const MINORITY_ACTION: &str = "reach";

/// FK angle triples of the two archetypes on the 17-joint skeleton.
pub fn archetype(action: &str) -> Option<AngleMatrix> {
    let mut a = vec![[0.0; 3]; 16];
    match action {
        MAJORITY_ACTION => {
            // Arms slightly away from the body.
            a[11] = [0.0, 0.0, 0.3];
            a[14] = [0.0, 0.0, -0.3];
        }
        MINORITY_ACTION => {
            // Both arms raised forward and up, knees bent, torso leaning.
            a[11] = [-2.2, 0.0, 0.4];
            a[12] = [-0.5, 0.0, 0.0];
            a[14] = [-2.2, 0.0, -0.4];
            a[15] = [-0.5, 0.0, 0.0];
            a[1] = [0.9, 0.0, 0.0];
            a[2] = [-1.3, 0.0, 0.0];
            a[4] = [0.9, 0.0, 0.0];
            a[5] = [-1.3, 0.0, 0.0];
            a[6] = [0.4, 0.0, 0.0];
        }
        _ => return None,
    }
    Some(AngleMatrix::new(a).expect("archetype angles are in range"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Seed poses per action; the first half drives the generated set, the
    /// second half the ground-truth and test sets.
    pub seeds_per_action: usize,
    /// Half-width of the uniform jitter added to archetype angles, radians.
    pub seed_jitter: f64,
    /// Half-width of the relative bone-length jitter of each seed.
    pub length_jitter: f64,
    pub generated_frames: usize,
    pub gt_frames: usize,
    pub test_frames: usize,
    /// Share of generated frames from the majority action.
    pub generated_majority: f64,
    /// Share of ground-truth frames from the majority action.
    pub gt_majority: f64,
    pub generator: GeneratorConfig,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seeds_per_action: 40,
            seed_jitter: 0.25,
            length_jitter: 0.08,
            generated_frames: 20_000,
            gt_frames: 2_000,
            test_frames: 1_000,
            generated_majority: 0.9,
            gt_majority: 0.5,
            generator: GeneratorConfig {
                root_box: RootBox {
                    min: [-150.0, -150.0, 4000.0],
                    max: [150.0, 150.0, 5000.0],
                },
                global_rotation_range: [[-0.1, 0.1], [-0.4, 0.4], [-0.1, 0.1]],
                ..GeneratorConfig::default()
            },
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.seeds_per_action < 2 {
            return Err(Error::config("synthetic.seeds_per_action", "must be at least 2"));
        }
        for (name, v) in [
            ("synthetic.generated_majority", self.generated_majority),
            ("synthetic.gt_majority", self.gt_majority),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if !(self.seed_jitter >= 0.0 && self.seed_jitter < 1.0) {
            return Err(Error::config("synthetic.seed_jitter", "must lie in [0, 1)"));
        }
        if !(self.length_jitter >= 0.0 && self.length_jitter < 0.5) {
            return Err(Error::config("synthetic.length_jitter", "must lie in [0, 0.5)"));
        }
        let k = self.generator.frames_per_sequence();
        for (name, n) in [
            ("synthetic.generated_frames", self.generated_frames),
            ("synthetic.gt_frames", self.gt_frames),
            ("synthetic.test_frames", self.test_frames),
        ] {
            if n == 0 || n % k != 0 {
                return Err(Error::config(
                    name,
                    format!("must be a positive multiple of the {k} frames per sequence"),
                ));
            }
        }
        Ok(())
    }

    /// Sequence counts per action for `frames` split at `majority`.
    pub fn split(&self, frames: usize, majority: f64) -> BTreeMap<String, usize> {
        let total = frames / self.generator.frames_per_sequence();
        let major = ((total as f64) * majority).round() as usize;
        BTreeMap::from([
            (MAJORITY_ACTION.to_string(), major.min(total)),
            (MINORITY_ACTION.to_string(), total - major.min(total)),
        ])
    }
}

pub struct SyntheticBenchmark {
    pub topology: SkeletonTopology,
    /// Seeds behind the generated set.
    pub seeds: Vec<(Pose3D, String)>,
    /// Seeds behind the ground-truth and test sets.
    pub heldout_seeds: Vec<(Pose3D, String)>,
    pub profiles: Vec<AngleRangeProfile>,
    pub heldout_profiles: Vec<AngleRangeProfile>,
    pub generated: Vec<GeneratedSequence>,
    pub gt: Vec<GeneratedSequence>,
    pub test: Vec<GeneratedSequence>,
}

/// Seed poses: archetype angles plus uniform jitter, per-seed bone lengths,
/// root on the optical axis. Order is `per_action` of each action in turn.
pub fn make_seeds(
    cfg: &SyntheticConfig,
    topo: &SkeletonTopology,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Pose3D, String)>> {
    let reference = SkeletonTopology::human36m_reference_lengths();
    topo.check_bones("synthetic seeds", reference.len())?;
    let mut out = Vec::new();
    for action in [MAJORITY_ACTION, MINORITY_ACTION] {
        let base = archetype(action).expect("known archetype");
        for _ in 0..cfg.seeds_per_action {
            let angles = AngleMatrix::new(
                base.rows()
                    .iter()
                    .map(|t| {
                        let mut j = *t;
                        for v in &mut j {
                            *v += rng.random_range(-cfg.seed_jitter..=cfg.seed_jitter);
                        }
                        j
                    })
                    .collect(),
            )?;
            let s = 1.0 + rng.random_range(-cfg.length_jitter..=cfg.length_jitter);
            let lengths = BoneLengths::new(reference.as_slice().iter().map(|l| l * s).collect())?;
            let pose = forward_kinematics(&angles, &lengths, Vector3::new(0.0, 0.0, 4500.0), topo)?;
            out.push((pose, action.to_string()));
        }
    }
    Ok(out)
}

pub fn build_benchmark(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let topo = SkeletonTopology::human36m();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let all = make_seeds(cfg, &topo, &mut rng)?;
    let half = cfg.seeds_per_action / 2;
    let (mut seeds, mut heldout) = (Vec::new(), Vec::new());
    for (i, s) in all.into_iter().enumerate() {
        if i % cfg.seeds_per_action < half {
            seeds.push(s);
        } else {
            heldout.push(s);
        }
    }
    let g = &cfg.generator;
    let profiles = extract_ranges(&seeds, &topo, g.range_padding, g.ik_frame)?;
    let heldout_profiles = extract_ranges(&heldout, &topo, g.range_padding, g.ik_frame)?;
    let templates = BoneLengthTemplateSet::from_seeds(&seeds, &topo)?;
    let heldout_templates = BoneLengthTemplateSet::from_seeds(&heldout, &topo)?;

    let run = |profiles: &[AngleRangeProfile],
               templates: &BoneLengthTemplateSet,
               frames: usize,
               majority: f64,
               stream: u64| {
        let gen_cfg = GeneratorConfig {
            action_sequences: cfg.split(frames, majority),
            rng_seed: cfg.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream),
            ..g.clone()
        };
        generate_dataset(profiles, templates, &gen_cfg, &topo)
    };
    let generated = run(&profiles, &templates, cfg.generated_frames, cfg.generated_majority, 1)?;
    let gt = run(&heldout_profiles, &heldout_templates, cfg.gt_frames, cfg.gt_majority, 2)?;
    let test = run(&heldout_profiles, &heldout_templates, cfg.test_frames, 0.5, 3)?;
    Ok(SyntheticBenchmark {
        topology: topo,
        seeds,
        heldout_seeds: heldout,
        profiles,
        heldout_profiles,
        generated,
        gt,
        test,
    })
}

/// Poses with their action labels, in sequence order.
pub fn frames_of(sequences: &[GeneratedSequence]) -> Vec<(Pose3D, String)> {
    sequences
        .iter()
        .flat_map(|s| s.frames.iter().map(move |f| (f.pose.clone(), s.action.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            seeds_per_action: 10,
            generated_frames: 1000,
            gt_frames: 200,
            test_frames: 100,
            ..SyntheticConfig::default()
        }
    }

    fn count(seqs: &[GeneratedSequence], action: &str) -> usize {
        seqs.iter().filter(|s| s.action == action).map(|s| s.frames.len()).sum()
    }

    #[test]
    fn splits_follow_configured_mix() {
        let b = build_benchmark(&small()).unwrap();
        assert_eq!(count(&b.generated, MAJORITY_ACTION), 900);
        assert_eq!(count(&b.generated, MINORITY_ACTION), 100);
        assert_eq!(count(&b.gt, MAJORITY_ACTION), 100);
        assert_eq!(count(&b.gt, MINORITY_ACTION), 100);
        assert_eq!(count(&b.test, MAJORITY_ACTION), count(&b.test, MINORITY_ACTION));
        assert_eq!(b.seeds.len(), 10);
        assert_eq!(b.heldout_seeds.len(), 10);
        assert_eq!(b.profiles.len(), 2);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = build_benchmark(&small()).unwrap();
        let b = build_benchmark(&small()).unwrap();
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.test, b.test);
        let c = build_benchmark(&SyntheticConfig { rng_seed: 7, ..small() }).unwrap();
        assert_ne!(a.generated, c.generated);
    }

    #[test]
    fn every_frame_is_in_front_of_the_camera() {
        let b = build_benchmark(&small()).unwrap();
        for (p, _) in frames_of(&b.generated).iter().chain(&frames_of(&b.gt)) {
            assert!(p.joints().iter().all(|j| j.z > 1000.0));
        }
    }

    #[test]
    fn rejects_frame_counts_off_the_sequence_grid() {
        let cfg = SyntheticConfig {
            gt_frames: 1234,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { .. })));
    }
}
