//! Per-joint 2D histograms over image coordinates and the propensity score of a
//! 2D pose under them.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Pose2D;

pub const DEFAULT_BIN_COUNT: usize = 64;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Normalized frequency grid for one joint. `freqs` is row-major with rows
/// indexed by the u bin: `freqs[iu * bins + iv]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub edges_u: Vec<f64>,
    pub edges_v: Vec<f64>,
    pub freqs: Vec<f64>,
}

impl JointHistogram {
    fn bins(&self) -> usize {
        self.edges_u.len() - 1
    }

    pub fn bin_of(&self, u: f64, v: f64) -> (usize, usize) {
        (bin_index(&self.edges_u, u), bin_index(&self.edges_v, v))
    }

    /// Frequency of the bin containing `(u, v)`; points outside the edges use
    /// the nearest boundary bin.
    pub fn frequency(&self, u: f64, v: f64) -> f64 {
        let (iu, iv) = self.bin_of(u, v);
        self.freqs[iu * self.bins() + iv]
    }
}

/// Bin of `x` on uniform `edges`, clamped to the outermost bins.
fn bin_index(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let t = ((x - lo) / (hi - lo) * bins as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = if hi - lo > 0.0 {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let mut edges: Vec<f64> = (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect();
    edges[bins] = hi;
    edges
}

/// Histogram construction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub bin_count: usize,
    pub epsilon: f64,
    /// Build the ground-truth maps on the generated map's bin edges instead
    /// of their own.
    pub shared_edges: bool,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bin_count: DEFAULT_BIN_COUNT,
            epsilon: DEFAULT_EPSILON,
            shared_edges: false,
        }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bin_count == 0 {
            return Err(Error::config("histogram.bin_count", "must be at least 1"));
        }
        let cells = (self.bin_count * self.bin_count) as f64;
        if !(self.epsilon >= 0.0 && self.epsilon * cells < 1.0) {
            return Err(Error::config(
                "histogram.epsilon",
                "must be >= 0 and below 1 / bin_count^2",
            ));
        }
        Ok(())
    }
}

/// One frequency grid per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMap {
    pub bin_count: usize,
    pub epsilon: f64,
    pub source: String,
    pub sample_count: usize,
    pub joints: Vec<JointHistogram>,
}

impl HistogramMap {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Structural checks for maps read from disk.
    pub fn validate(&self) -> Result<()> {
        let b = self.bin_count;
        if b == 0 {
            return Err(Error::InvalidValue("histogram with zero bins".into()));
        }
        for (j, h) in self.joints.iter().enumerate() {
            if h.edges_u.len() != b + 1 || h.edges_v.len() != b + 1 || h.freqs.len() != b * b {
                return Err(Error::InvalidValue(format!(
                    "histogram joint {j} does not have {b} x {b} bins"
                )));
            }
            for e in [&h.edges_u, &h.edges_v] {
                if e.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidValue(format!(
                        "histogram joint {j} edges are not strictly increasing"
                    )));
                }
            }
            if h.freqs.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
                return Err(Error::InvalidValue(format!(
                    "histogram joint {j} has invalid frequencies"
                )));
            }
        }
        Ok(())
    }
}

/// Per-joint 2D histograms whose edges span each joint's observed range.
pub fn build_histogram(poses: &[Pose2D], bin_count: usize, epsilon: f64) -> Result<HistogramMap> {
    let first = poses.first().ok_or(Error::Empty("2D poses for histogram"))?;
    let j = first.len();
    let mut lo = vec![[f64::INFINITY; 2]; j];
    let mut hi = vec![[f64::NEG_INFINITY; 2]; j];
    for p in poses {
        check_len(p, j)?;
        for (i, q) in p.joints().iter().enumerate() {
            for k in 0..2 {
                lo[i][k] = lo[i][k].min(q[k]);
                hi[i][k] = hi[i][k].max(q[k]);
            }
        }
    }
    check_smoothing(bin_count, epsilon)?;
    let edges = (0..j)
        .map(|i| {
            (
                uniform_edges(lo[i][0], hi[i][0], bin_count),
                uniform_edges(lo[i][1], hi[i][1], bin_count),
            )
        })
        .collect();
    Ok(count(poses, edges, bin_count, epsilon))
}

/// Histograms of `poses` on the bin edges of `template`, for comparisons on a
/// shared grid.
pub fn build_histogram_on_edges(
    poses: &[Pose2D],
    template: &HistogramMap,
    epsilon: f64,
) -> Result<HistogramMap> {
    if poses.is_empty() {
        return Err(Error::Empty("2D poses for histogram"));
    }
    for p in poses {
        check_len(p, template.joint_count())?;
    }
    check_smoothing(template.bin_count, epsilon)?;
    let edges = template
        .joints
        .iter()
        .map(|h| (h.edges_u.clone(), h.edges_v.clone()))
        .collect();
    Ok(count(poses, edges, template.bin_count, epsilon))
}

fn check_len(p: &Pose2D, j: usize) -> Result<()> {
    if p.len() != j {
        return Err(Error::DimensionMismatch {
            context: "2D pose joints",
            expected: j,
            actual: p.len(),
        });
    }
    Ok(())
}

fn check_smoothing(bin_count: usize, epsilon: f64) -> Result<()> {
    if bin_count == 0 {
        return Err(Error::config("histogram.bin_count", "must be at least 1"));
    }
    let cells = (bin_count * bin_count) as f64;
    if !(epsilon >= 0.0 && epsilon * cells < 1.0) {
        return Err(Error::config(
            "histogram.epsilon",
            format!("must satisfy 0 <= epsilon < 1 / {cells}"),
        ));
    }
    Ok(())
}

fn count(
    poses: &[Pose2D],
    edges: Vec<(Vec<f64>, Vec<f64>)>,
    bins: usize,
    epsilon: f64,
) -> HistogramMap {
    let cells = bins * bins;
    let n = poses.len() as f64;
    // Mixing with the uniform grid keeps the total at one while lifting every
    // cell to at least epsilon.
    let keep = 1.0 - epsilon * cells as f64;
    let joints = edges
        .into_iter()
        .enumerate()
        .map(|(i, (edges_u, edges_v))| {
            let mut counts = vec![0usize; cells];
            for p in poses {
                let q = p.joint(i);
                let iu = bin_index(&edges_u, q.x);
                let iv = bin_index(&edges_v, q.y);
                counts[iu * bins + iv] += 1;
            }
            let freqs = counts
                .iter()
                .map(|&c| keep * (c as f64 / n) + epsilon)
                .collect();
            JointHistogram {
                edges_u,
                edges_v,
                freqs,
            }
        })
        .collect();
    HistogramMap {
        bin_count: bins,
        epsilon,
        source: String::new(),
        sample_count: poses.len(),
        joints,
    }
}

/// Number of samples kept when subsampling `n` items by `fraction`: `ceil(fraction * n)`.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    // The tolerance keeps products like 0.1 * 30 from rounding up a whole sample.
    let raw = fraction * n as f64;
    let c = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    c.clamp(usize::from(n > 0), n)
}

/// Uniform subsample without replacement, indices ascending.
pub fn subsample_indices<R: Rng>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", "must lie in (0, 1]"));
    }
    if n == 0 {
        return Err(Error::Empty("pose set to subsample"));
    }
    let mut picked = index::sample(rng, n, subsample_count(n, fraction)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Histogram of a random `fraction` of the ground-truth 2D poses. Returns the
/// map and the indices of the poses it was built from.
pub fn build_gt_histogram<R: Rng>(
    gt_poses: &[Pose2D],
    fraction: f64,
    bin_count: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<(HistogramMap, Vec<usize>)> {
    let picked = subsample_indices(gt_poses.len(), fraction, rng)?;
    let subset: Vec<Pose2D> = picked.iter().map(|&i| gt_poses[i].clone()).collect();
    let mut map = build_histogram(&subset, bin_count, epsilon)?;
    map.source = "gt".into();
    Ok((map, picked))
}

/// Propensity of a 2D pose: the mean over joints of its bin frequency.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PropensityScore(f64);

impl PropensityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn propensity(pose: &Pose2D, map: &HistogramMap) -> Result<PropensityScore> {
    check_len(pose, map.joint_count())?;
    let sum: f64 = map
        .joints
        .iter()
        .zip(pose.joints())
        .map(|(h, q)| h.frequency(q.x, q.y))
        .sum();
    Ok(PropensityScore(sum / map.joint_count() as f64))
}
