//! Desk-scale experiments on the synthetic benchmark: accuracy against the
//! ground-truth fraction, and the cIPS ablation.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{make_pair, CameraIntrinsics, PosePair};
use crate::crm::CrmConfig;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::estimator::{
    predict, train, Architecture, EstimatorModel, InputNormalizer, LossTrace, Precision, Real,
    TrainConfig,
};
use crate::metrics::{evaluate, EvalReport};
use crate::propensity::{
    build_histogram, build_histogram_on_edges, subsample_indices, HistogramConfig, HistogramMap,
};
use crate::skeleton::{Pose2D, Pose3D};
use crate::synthetic::{build_benchmark, frames_of, SyntheticBenchmark, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub benchmark: SyntheticConfig,
    pub camera: CameraIntrinsics,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub crm: CrmConfig,
    pub histogram: HistogramConfig,
    pub gt_fractions: Vec<f64>,
    pub repetitions: usize,
    /// Per-repetition seeds; `0..repetitions` when empty.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            benchmark: SyntheticConfig::default(),
            camera: CameraIntrinsics::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            crm: CrmConfig::default(),
            // A few hundred ground-truth samples leave most of a 64 x 64 grid
            // empty, so the benchmark uses a coarser one.
            histogram: HistogramConfig {
                bin_count: 8,
                ..HistogramConfig::default()
            },
            gt_fractions: vec![0.03, 0.10, 0.25, 0.50],
            repetitions: 5,
            seeds: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty plain file name"));
        }
        self.benchmark.validate()?;
        self.camera.validate()?;
        self.architecture.validate()?;
        self.train.validate()?;
        self.crm.validate()?;
        self.histogram.validate()?;
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repetitions {
            return Err(Error::config("seeds", "must list one seed per repetition"));
        }
        if let Some(f) = self.gt_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config("gt_fractions", format!("{f} is outside (0, 1]")));
        }
        if self.architecture.joints != 17 {
            return Err(Error::config("architecture.joints", "the benchmark skeleton has 17 joints"));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repetitions as u64).collect()
        } else {
            self.seeds.clone()
        }
    }
}

/// Benchmark data as training pairs, shared by every run of an experiment.
pub struct PreparedBenchmark {
    pub benchmark: SyntheticBenchmark,
    pub generated: Vec<PosePair>,
    pub gt: Vec<PosePair>,
    pub test_inputs: Vec<Pose2D>,
    pub test_targets: Vec<Pose3D>,
    pub test_actions: Vec<String>,
    pub hist_generated: HistogramMap,
}

pub fn prepare_benchmark(spec: &ExperimentSpec) -> Result<PreparedBenchmark> {
    spec.validate()?;
    let benchmark = build_benchmark(&spec.benchmark)?;
    let topo = &benchmark.topology;
    let pairs = |seqs| -> Result<Vec<(PosePair, String)>> {
        frames_of(seqs)
            .into_iter()
            .map(|(p, a)| Ok((make_pair(&p, &spec.camera, topo)?, a)))
            .collect()
    };
    let generated: Vec<PosePair> = pairs(&benchmark.generated)?.into_iter().map(|p| p.0).collect();
    let gt: Vec<PosePair> = pairs(&benchmark.gt)?.into_iter().map(|p| p.0).collect();
    let (test, test_actions): (Vec<PosePair>, Vec<String>) = pairs(&benchmark.test)?.into_iter().unzip();
    let gen_inputs: Vec<Pose2D> = generated.iter().map(|p| p.input.clone()).collect();
    let mut hist_generated = build_histogram(&gen_inputs, spec.histogram.bin_count, spec.histogram.epsilon)?;
    hist_generated.source = "generated".into();
    Ok(PreparedBenchmark {
        benchmark,
        generated,
        gt,
        test_inputs: test.iter().map(|p| p.input.clone()).collect(),
        test_targets: test.into_iter().map(|p| p.target).collect(),
        test_actions,
        hist_generated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub fraction: f64,
    pub seed: u64,
    pub gt_samples: usize,
    pub report: EvalReport,
    pub trace: LossTrace,
}

fn train_and_eval<T: Real>(
    data: &PreparedBenchmark,
    spec: &ExperimentSpec,
    gt: &[PosePair],
    hist_gt: &HistogramMap,
    cfg: &TrainConfig,
    crm: &CrmConfig,
    seed: u64,
) -> Result<(EvalReport, LossTrace)> {
    let normalizer = InputNormalizer::for_camera(spec.camera);
    let mut model = EstimatorModel::<T>::init(spec.architecture, seed)?;
    let trace = train(&mut model, &data.generated, gt, hist_gt, &data.hist_generated, &normalizer, cfg, crm)?;
    let preds = predict(&model, &normalizer, &data.test_inputs)?;
    let report = evaluate(&preds, &data.test_targets, &data.test_actions, data.benchmark.topology.root())?;
    Ok((report, trace))
}

/// One training run. The seed fixes the ground-truth subsample, its
/// histogram, the initial weights and the batch order, so two runs with the
/// same seed differ only in what the arguments change.
pub fn run_trial(
    data: &PreparedBenchmark,
    spec: &ExperimentSpec,
    fraction: f64,
    seed: u64,
    crm: &CrmConfig,
) -> Result<TrialResult> {
    let annotate = |e: Error| Error::Trial {
        fraction,
        seed,
        source: Box::new(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Pose2D> = data.gt.iter().map(|p| p.input.clone()).collect();
    let h = &spec.histogram;
    let picked = subsample_indices(inputs.len(), fraction, &mut rng).map_err(annotate)?;
    let subset: Vec<Pose2D> = picked.iter().map(|&i| inputs[i].clone()).collect();
    let mut hist_gt = if h.shared_edges {
        build_histogram_on_edges(&subset, &data.hist_generated, h.epsilon)
    } else {
        build_histogram(&subset, h.bin_count, h.epsilon)
    }
    .map_err(annotate)?;
    hist_gt.source = "gt".into();
    let gt: Vec<PosePair> = picked.iter().map(|&i| data.gt[i].clone()).collect();
    let cfg = TrainConfig {
        rng_seed: seed,
        gt_fraction: fraction,
        ..spec.train
    };
    let (report, trace) = match spec.train.precision {
        Precision::F32 => train_and_eval::<f32>(data, spec, &gt, &hist_gt, &cfg, crm, seed),
        Precision::F64 => train_and_eval::<f64>(data, spec, &gt, &hist_gt, &cfg, crm, seed),
    }
    .map_err(annotate)?;
    log::info!(
        "{}: fraction {fraction} seed {seed}: mpjpe {:.3}",
        spec.name,
        report.overall.mpjpe
    );
    Ok(TrialResult {
        fraction,
        seed,
        gt_samples: gt.len(),
        report,
        trace,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub gt_samples: usize,
    pub runs: usize,
    pub mpjpe_mean: f64,
    pub mpjpe_sd: f64,
    pub p_mpjpe_mean: f64,
    pub mpjpe_by_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub rows: Vec<SweepRow>,
    /// Spearman rank correlation between fraction and mean MPJPE; negative
    /// when more ground truth helps. Reported only.
    pub trend_spearman: f64,
    pub trials: Vec<TrialResult>,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// One model per (fraction, seed), evaluated on the balanced test set.
pub fn run_fraction_sweep(data: &PreparedBenchmark, spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate()?;
    if spec.gt_fractions.is_empty() {
        return Err(Error::config("gt_fractions", "must list at least one fraction"));
    }
    let seeds = spec.run_seeds();
    let jobs: Vec<(usize, f64, u64)> = spec
        .gt_fractions
        .iter()
        .enumerate()
        .flat_map(|(i, &f)| seeds.iter().map(move |&s| (i, f, s)))
        .collect();
    let trials: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(_, f, s)| run_trial(data, spec, f, s, &spec.crm))
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = spec
        .gt_fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| {
            let mine: Vec<&TrialResult> = jobs
                .iter()
                .zip(&trials)
                .filter(|(j, _)| j.0 == i)
                .map(|(_, t)| t)
                .collect();
            let m: Vec<f64> = mine.iter().map(|t| t.report.overall.mpjpe).collect();
            let p: Vec<f64> = mine.iter().map(|t| t.report.overall.p_mpjpe).collect();
            let (mpjpe_mean, mpjpe_sd) = mean_sd(&m);
            SweepRow {
                fraction,
                gt_samples: mine[0].gt_samples,
                runs: mine.len(),
                mpjpe_mean,
                mpjpe_sd,
                p_mpjpe_mean: mean_sd(&p).0,
                mpjpe_by_seed: m,
            }
        })
        .collect();
    let trend_spearman = spearman(
        &rows.iter().map(|r| r.fraction).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.mpjpe_mean).collect::<Vec<_>>(),
    );
    Ok(SweepResult {
        name: spec.name.clone(),
        rows,
        trend_spearman,
        trials,
    })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,gt_samples,runs,mpjpe_mean,mpjpe_sd,p_mpjpe_mean\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.fraction, r.gt_samples, r.runs, r.mpjpe_mean, r.mpjpe_sd, r.p_mpjpe_mean
            );
        }
        s
    }

    pub fn row(&self, fraction: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.fraction == fraction)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let dir = dir.join(&self.name);
        write_atomic(&dir.join("sweep.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub treatment: TrialResult,
    pub control: TrialResult,
    /// Treatment minus control.
    pub delta: MetricDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub treatment: CrmConfig,
    pub control: CrmConfig,
    pub pairs: Vec<PairedRun>,
    /// Seeds where the treatment has strictly lower MPJPE.
    pub treatment_wins: usize,
}

/// Two runs per seed at the spec's ground-truth fraction, differing only in
/// the CRM settings.
pub fn run_paired(
    data: &PreparedBenchmark,
    spec: &ExperimentSpec,
    treatment: &CrmConfig,
    control: &CrmConfig,
) -> Result<AblationResult> {
    spec.validate()?;
    treatment.validate()?;
    control.validate()?;
    let fraction = spec.train.gt_fraction;
    let jobs: Vec<(u64, bool)> = spec
        .run_seeds()
        .into_iter()
        .flat_map(|s| [(s, true), (s, false)])
        .collect();
    let trials: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(s, t)| run_trial(data, spec, fraction, s, if t { treatment } else { control }))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    let mut it = trials.into_iter();
    while let (Some(t), Some(c)) = (it.next(), it.next()) {
        let (a, b) = (&t.report.overall, &c.report.overall);
        let delta = MetricDelta {
            mpjpe: a.mpjpe - b.mpjpe,
            p_mpjpe: a.p_mpjpe - b.p_mpjpe,
            pck: a.pck - b.pck,
            auc: a.auc - b.auc,
        };
        pairs.push(PairedRun {
            seed: t.seed,
            treatment: t,
            control: c,
            delta,
        });
    }
    Ok(AblationResult {
        name: spec.name.clone(),
        treatment: *treatment,
        control: *control,
        treatment_wins: pairs.iter().filter(|p| p.delta.mpjpe < 0.0).count(),
        pairs,
    })
}

/// The spec's CRM settings against the same settings with all weights forced to 1.
pub fn run_crm_ablation(data: &PreparedBenchmark, spec: &ExperimentSpec) -> Result<AblationResult> {
    let control = CrmConfig {
        unit_weights: true,
        ..spec.crm
    };
    run_paired(data, spec, &spec.crm, &control)
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "seed,mpjpe_crm,mpjpe_unit,delta_mpjpe,delta_p_mpjpe,delta_pck,delta_auc\n",
        );
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.seed,
                p.treatment.report.overall.mpjpe,
                p.control.report.overall.mpjpe,
                p.delta.mpjpe,
                p.delta.p_mpjpe,
                p.delta.pck,
                p.delta.auc
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let dir = dir.join(&self.name);
        write_atomic(&dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}
