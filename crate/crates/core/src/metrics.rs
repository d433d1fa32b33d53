//! Pose-error metrics: MPJPE, similarity-aligned P-MPJPE, PCK and AUC.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Pose3D;

pub const DEFAULT_PCK_THRESHOLD: f64 = 150.0;

/// 0, 5, ..., 150 mm.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=30).map(|i| 5.0 * i as f64).collect()
}

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            context: "metric pose joints",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if gt.len() == 0 {
        return Err(Error::Empty("pose"));
    }
    Ok(())
}

pub fn per_joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    Ok(pred
        .joints()
        .iter()
        .zip(gt.joints())
        .map(|(p, g)| (p - g).norm())
        .collect())
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = per_joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().fold(Vector3::zeros(), |a, b| a + b) / p.len() as f64
}

/// Least-squares similarity transform (scale, rotation, translation) taking
/// `pred` onto `gt`; returns the transformed `pred`.
pub fn similarity_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let (mx, my) = (centroid(pred.joints()), centroid(gt.joints()));
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, g) in pred.joints().iter().zip(gt.joints()) {
        let (x, y) = (p - mx, g - my);
        cov += y * x.transpose();
        var_x += x.norm_squared();
    }
    cov /= n;
    var_x /= n;
    if !(var_x > 1e-18) {
        return Err(Error::AlignmentFailure("prediction collapses to a point"));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(Error::AlignmentFailure("SVD did not converge")),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-12 * sv[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::AlignmentFailure("rank-deficient cross-covariance"));
    }
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the direction paired with the smallest singular value.
        let imin = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        d[(imin, imin)] = -1.0;
    }
    let r = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let s = trace / var_x;
    let t = my - s * r * mx;
    Pose3D::new(pred.joints().iter().map(|p| s * r * p + t).collect())
}

pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    mpjpe(&similarity_align(pred, gt)?, gt)
}

fn all_errors(preds: &[Pose3D], gts: &[Pose3D]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            context: "metric pose count",
            expected: gts.len(),
            actual: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let per: Vec<Vec<f64>> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| per_joint_errors(p, g))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

fn auc_of(errors: &[f64], thresholds: &[f64]) -> f64 {
    thresholds.iter().map(|&t| pck_of(errors, t)).sum::<f64>() / thresholds.len() as f64
}

/// Percentage of joints, over all poses, with error at most `threshold` mm.
/// Inclusive so the 0 mm point of the AUC grid counts exact predictions.
pub fn pck(preds: &[Pose3D], gts: &[Pose3D], threshold: f64) -> Result<f64> {
    Ok(pck_of(&all_errors(preds, gts)?, threshold))
}

/// Mean PCK over `thresholds`.
pub fn auc(preds: &[Pose3D], gts: &[Pose3D], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    Ok(auc_of(&all_errors(preds, gts)?, thresholds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: MetricSummary,
    pub per_action: BTreeMap<String, MetricSummary>,
}

struct PoseScore {
    mpjpe: f64,
    p_mpjpe: f64,
    errors: Vec<f64>,
}

fn summarize(scores: &[&PoseScore], thresholds: &[f64]) -> MetricSummary {
    let n = scores.len() as f64;
    let errors: Vec<f64> = scores.iter().flat_map(|s| s.errors.iter().copied()).collect();
    MetricSummary {
        mpjpe: scores.iter().map(|s| s.mpjpe).sum::<f64>() / n,
        p_mpjpe: scores.iter().map(|s| s.p_mpjpe).sum::<f64>() / n,
        pck: pck_of(&errors, DEFAULT_PCK_THRESHOLD),
        auc: auc_of(&errors, thresholds),
        sample_count: scores.len(),
    }
}

/// Full report. Both sets are re-centred on `root` before scoring.
pub fn evaluate(
    preds: &[Pose3D],
    gts: &[Pose3D],
    actions: &[String],
    root: usize,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || actions.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            context: "evaluation set sizes",
            expected: gts.len(),
            actual: if preds.len() != gts.len() { preds.len() } else { actions.len() },
        });
    }
    if gts.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scores: Vec<PoseScore> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| {
            check_pair(p, g)?;
            if root >= g.len() {
                return Err(Error::InvalidValue(format!("root index {root} out of range")));
            }
            let (p, g) = (p.root_relative(root), g.root_relative(root));
            debug_assert!(p.joint(root).norm() == 0.0 && g.joint(root).norm() == 0.0);
            Ok(PoseScore {
                mpjpe: mpjpe(&p, &g)?,
                p_mpjpe: p_mpjpe(&p, &g)?,
                errors: per_joint_errors(&p, &g)?,
            })
        })
        .collect::<Result<_>>()?;
    let thresholds = auc_thresholds();
    let mut groups: BTreeMap<&str, Vec<&PoseScore>> = BTreeMap::new();
    for (s, a) in scores.iter().zip(actions) {
        groups.entry(a.as_str()).or_default().push(s);
    }
    Ok(EvalReport {
        overall: summarize(&scores.iter().collect::<Vec<_>>(), &thresholds),
        per_action: groups
            .into_iter()
            .map(|(a, v)| (a.to_string(), summarize(&v, &thresholds)))
            .collect(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![("all".to_string(), &self.overall)];
        rows.extend(self.per_action.iter().map(|(a, m)| (a.clone(), m)));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<w$}  {:>10}  {:>10}  {:>8}  {:>8}  {:>8}\n",
            "action", "MPJPE", "P-MPJPE", "PCK", "AUC", "n"
        );
        for (a, m) in rows {
            out.push_str(&format!(
                "{:<w$}  {:>10.3}  {:>10.3}  {:>8.2}  {:>8.2}  {:>8}\n",
                a, m.mpjpe, m.p_mpjpe, m.pck, m.auc, m.sample_count
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::bone_rotation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> Pose3D {
        Pose3D::new(
            (0..j)
                .map(|_| Vector3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_poses_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 17);
        assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
        assert!(p_mpjpe(&p, &p).unwrap() < 1e-9);
    }

    #[test]
    fn uniform_offset_is_five_mm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pose(&mut rng, 17).root_relative(0);
        let q = p.translated(Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(mpjpe(&q, &p).unwrap(), 5.0);
    }

    #[test]
    fn mpjpe_matches_norm_then_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_pose(&mut rng, 17), random_pose(&mut rng, 17));
        let mut total = 0.0;
        for j in 0..17 {
            let d = a.joint(j) - b.joint(j);
            total += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        }
        assert!((mpjpe(&a, &b).unwrap() - total / 17.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_copy_aligns_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = random_pose(&mut rng, 17);
            let r = bone_rotation([rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)]);
            let s = rng.random_range(0.3..3.0);
            let t = Vector3::new(rng.random_range(-900.0..900.0), 10.0, -200.0);
            let g = Pose3D::new(p.joints().iter().map(|x| s * r.matrix() * x + t).collect()).unwrap();
            assert!(p_mpjpe(&p, &g).unwrap() < 1e-6);
        }
    }

    #[test]
    fn reflection_is_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng, 17);
        let g = Pose3D::new(p.joints().iter().map(|x| Vector3::new(-x.x, x.y, x.z)).collect()).unwrap();
        // A mirror image is not reachable by a proper rotation.
        assert!(p_mpjpe(&p, &g).unwrap() > 1.0);
    }

    #[test]
    fn collinear_prediction_fails_alignment() {
        let p = Pose3D::new((0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect()).unwrap();
        let g = Pose3D::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ])
        .unwrap();
        assert!(matches!(p_mpjpe(&p, &g), Err(Error::AlignmentFailure(_))));
    }

    /// Closed-form rotation (no scale) followed by a fine scale grid search on
    /// the squared residual.
    fn grid_oracle(p: &Pose3D, g: &Pose3D) -> (f64, f64) {
        let (mx, my) = (centroid(p.joints()), centroid(g.joints()));
        let xs: Vec<_> = p.joints().iter().map(|x| x - mx).collect();
        let ys: Vec<_> = g.joints().iter().map(|y| y - my).collect();
        let mut h = Matrix3::zeros();
        for (x, y) in xs.iter().zip(&ys) {
            h += y * x.transpose();
        }
        let svd = h.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        d[(2, 2)] = (u * vt).determinant().signum();
        // nalgebra orders singular values descending for 3x3 inputs of full rank.
        let r = u * d * vt;
        let sse = |s: f64| -> f64 {
            xs.iter().zip(&ys).map(|(x, y)| (s * r * x - y).norm_squared()).sum()
        };
        let (mut lo, mut hi) = (0.0, 5.0);
        let mut best = 1.0;
        for _ in 0..6 {
            let step = (hi - lo) / 1000.0;
            best = (0..=1000)
                .map(|i| lo + step * i as f64)
                .min_by(|a, b| sse(*a).total_cmp(&sse(*b)))
                .unwrap();
            lo = (best - step).max(0.0);
            hi = best + step;
        }
        let mean_err = xs.iter().zip(&ys).map(|(x, y)| (best * r * x - y).norm()).sum::<f64>() / xs.len() as f64;
        (sse(best), mean_err)
    }

    #[test]
    fn alignment_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let p = random_pose(&mut rng, 17);
            let g = random_pose(&mut rng, 17);
            let a = similarity_align(&p, &g).unwrap();
            let sse: f64 = a.joints().iter().zip(g.joints()).map(|(x, y)| (x - y).norm_squared()).sum();
            let (oracle_sse, oracle_mpjpe) = grid_oracle(&p, &g);
            assert!(sse <= oracle_sse * (1.0 + 1e-9) + 1e-9, "{sse} vs {oracle_sse}");
            assert!((p_mpjpe(&p, &g).unwrap() - oracle_mpjpe).abs() < 1e-4 * oracle_mpjpe.max(1.0));
        }
    }

    #[test]
    fn pck_and_auc_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gts: Vec<_> = (0..4).map(|_| random_pose(&mut rng, 17)).collect();
        assert_eq!(pck(&gts, &gts, 150.0).unwrap(), 100.0);
        assert_eq!(auc(&gts, &gts, &auc_thresholds()).unwrap(), 100.0);
        let far: Vec<_> = gts.iter().map(|g| g.translated(Vector3::new(300.0, 0.0, 0.0))).collect();
        assert_eq!(pck(&far, &gts, 150.0).unwrap(), 0.0);
        assert_eq!(auc(&far, &gts, &auc_thresholds()).unwrap(), 0.0);
        assert!(pck(&[], &[], 150.0).is_err());
        assert!(auc(&gts, &gts, &[]).is_err());
    }

    #[test]
    fn pck_auc_match_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gts: Vec<_> = (0..10).map(|_| random_pose(&mut rng, 17)).collect();
        let mut errs = Vec::new();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| {
                Pose3D::new(
                    g.joints()
                        .iter()
                        .map(|x| {
                            let e: f64 = rng.random_range(0.0..250.0);
                            errs.push(e);
                            x + Vector3::new(0.0, 0.0, e)
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let count = |t: f64| errs.iter().filter(|&&e| e <= t).count() as f64 * 100.0 / errs.len() as f64;
        assert!((pck(&preds, &gts, 150.0).unwrap() - count(150.0)).abs() < 1e-9);
        let mut acc = 0.0;
        for k in 0..=30 {
            acc += count(5.0 * k as f64);
        }
        assert!((auc(&preds, &gts, &auc_thresholds()).unwrap() - acc / 31.0).abs() < 1e-9);
    }

    #[test]
    fn report_groups_by_action_and_root_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gts: Vec<_> = (0..6).map(|_| random_pose(&mut rng, 17)).collect();
        let preds: Vec<_> = gts.iter().map(|g| g.translated(Vector3::new(1e3, 0.0, 0.0))).collect();
        let actions: Vec<String> = ["a", "b", "a", "b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let r = evaluate(&preds, &gts, &actions, 0).unwrap();
        assert!(r.overall.mpjpe < 1e-9);
        assert_eq!(r.overall.sample_count, 6);
        assert_eq!(r.per_action["a"].sample_count, 3);
        assert_eq!(r.per_action.len(), 3);
        assert!(r.to_table().lines().count() == 5);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn alignment_never_increases_error(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_pose(&mut rng, 17);
            let g = random_pose(&mut rng, 17);
            prop_assert!(p_mpjpe(&p, &g).unwrap() <= mpjpe(&p, &g).unwrap() + 1e-9);
        }

        #[test]
        fn pck_monotone_in_threshold(seed in any::<u64>(), t in 0.0..400.0f64, dt in 0.0..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![random_pose(&mut rng, 17)];
            let g = vec![random_pose(&mut rng, 17)];
            prop_assert!(pck(&p, &g, t).unwrap() <= pck(&p, &g, t + dt).unwrap());
        }
    }
}
