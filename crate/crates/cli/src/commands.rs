use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use posegu::camera::PosePair;
use posegu::crm::CrmConfig;
use posegu::dataset::{
    read_dataset, read_to_string, records_from_poses, records_from_sequences, write_atomic,
    write_dataset, DatasetRecord, Source,
};
use posegu::estimator::{
    predict, train, Checkpoint, EstimatorModel, InputNormalizer, LossTrace, Precision, Real,
    TrainConfig,
};
use posegu::experiments::{prepare_benchmark, run_crm_ablation, run_fraction_sweep, ExperimentSpec};
use posegu::metrics::evaluate;
use posegu::posegen::{extract_ranges, generate_dataset, select_seeds, BoneLengthTemplateSet, GeneratorConfig};
use posegu::propensity::{build_gt_histogram, HistogramMap};
use posegu::skeleton::{Pose2D, Pose3D, SkeletonTopology};
use posegu::synthetic::{build_benchmark, SyntheticConfig};
use posegu::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    check_artifact, file_digest, to_json_pretty, EvalFile, HistogramFile, PipelineConfig, Provenance,
    RangesFile, ARTIFACT_VERSION,
};

/// Resolved global options shared by every verb.
pub struct Context {
    pub config: PipelineConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub topology: SkeletonTopology,
}

impl Context {
    pub fn new(config: PipelineConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let topology = config.topology()?;
        Ok(Self {
            seed: seed.unwrap_or(config.rng_seed),
            topology,
            config,
            out,
        })
    }

    /// `--out` if given, else `name` inside the configured output directory.
    fn out_path(&self, name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.config.output_dir.join(name))
    }

    fn digest(&self) -> String {
        self.topology.digest()
    }
}

fn read_dataset_nonempty(path: &Path, topo: &SkeletonTopology) -> Result<Vec<DatasetRecord>> {
    let records = read_dataset(path, topo)?;
    if records.is_empty() {
        return Err(Error::Empty("dataset file"));
    }
    Ok(records)
}

fn labelled_poses(records: &[DatasetRecord]) -> Result<Vec<(Pose3D, String)>> {
    records.iter().map(|r| Ok((r.pose3d()?, r.action.clone()))).collect()
}

fn count_by_action<'a>(actions: impl Iterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for a in actions {
        *m.entry(a.to_string()).or_insert(0) += 1;
    }
    m
}

fn print_counts(counts: &BTreeMap<String, usize>) {
    for (a, n) in counts {
        println!("  {a}: {n}");
    }
}

pub fn extract_ranges_cmd(ctx: &Context, seeds_file: &Path) -> Result<PathBuf> {
    let records = read_dataset_nonempty(seeds_file, &ctx.topology)?;
    if let Some(r) = records.iter().find(|r| r.action.is_empty()) {
        return Err(Error::InvalidValue(format!(
            "{}: frame {} has an empty action label",
            seeds_file.display(),
            r.frame_id
        )));
    }
    let g = &ctx.config.generator;
    let actions: Vec<String> = records.iter().map(|r| r.action.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let picked = select_seeds(&actions, g.seed_samples_per_action, &mut rng);
    let all = labelled_poses(&records)?;
    let seeds: Vec<(Pose3D, String)> = picked.iter().map(|&i| all[i].clone()).collect();

    let profiles = extract_ranges(&seeds, &ctx.topology, g.range_padding, g.ik_frame)?;
    let file = RangesFile {
        format_version: ARTIFACT_VERSION,
        topology: ctx.digest(),
        seed_counts: count_by_action(seeds.iter().map(|s| s.1.as_str())),
        profiles,
        templates: BoneLengthTemplateSet::from_seeds(&seeds, &ctx.topology)?,
    };
    let out = ctx.out_path("ranges.json");
    write_atomic(&out, to_json_pretty(&file)?.as_bytes())?;
    println!("{} profiles from {} seeds -> {}", file.profiles.len(), seeds.len(), out.display());
    print_counts(&file.seed_counts);
    Ok(out)
}

fn read_ranges(path: &Path, ctx: &Context) -> Result<RangesFile> {
    let text = read_to_string(path)?;
    let file: RangesFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    check_artifact("ranges file", file.format_version, &file.topology, &ctx.digest())?;
    if file.profiles.is_empty() {
        return Err(Error::Empty("angle range profiles"));
    }
    Ok(file)
}

pub fn generate_cmd(ctx: &Context, ranges_file: &Path) -> Result<PathBuf> {
    let ranges = read_ranges(ranges_file, ctx)?;
    let gen_cfg = GeneratorConfig {
        rng_seed: ctx.seed,
        ..ctx.config.generator.clone()
    };
    let sequences = generate_dataset(&ranges.profiles, &ranges.templates, &gen_cfg, &ctx.topology)?;
    let records = records_from_sequences(&sequences, &ctx.config.camera, &ctx.topology, Source::Generated)?;
    let out = ctx.out_path("generated.jsonl");
    write_dataset(&out, &records)?;
    println!("{} frames in {} sequences -> {}", records.len(), sequences.len(), out.display());
    print_counts(&count_by_action(records.iter().map(|r| r.action.as_str())));
    Ok(out)
}

pub fn histogram_cmd(ctx: &Context, dataset_file: &Path, fraction: f64) -> Result<PathBuf> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig {
            field: "--fraction".into(),
            reason: format!("{fraction} is outside (0, 1]"),
        });
    }
    let bytes = read_to_string(dataset_file)?;
    let records = read_dataset_nonempty(dataset_file, &ctx.topology)?;
    let inputs: Vec<Pose2D> = records.iter().map(|r| r.pose2d()).collect::<Result<_>>()?;
    let h = &ctx.config.histogram;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let (mut map, picked) = build_gt_histogram(&inputs, fraction, h.bin_count, h.epsilon, &mut rng)?;
    map.source = match records[0].source {
        Source::Gt => "gt".into(),
        Source::Generated => "generated".into(),
    };
    let file = HistogramFile {
        format_version: ARTIFACT_VERSION,
        topology: ctx.digest(),
        provenance: Provenance {
            source_file: dataset_file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            source_digest: file_digest(bytes.as_bytes()),
            fraction,
            seed: ctx.seed,
            frame_ids: picked.iter().map(|&i| records[i].frame_id).collect(),
        },
        map,
    };
    let out = ctx.out_path("histogram.json");
    write_atomic(&out, to_json_pretty(&file)?.as_bytes())?;
    println!(
        "{} of {} records, {} bins per axis -> {}",
        picked.len(),
        records.len(),
        file.map.bin_count,
        out.display()
    );
    Ok(out)
}

fn read_histogram(path: &Path, ctx: &Context) -> Result<HistogramFile> {
    let text = read_to_string(path)?;
    let file: HistogramFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    check_artifact("histogram file", file.format_version, &file.topology, &ctx.digest())?;
    file.map.validate()?;
    if file.map.joint_count() != ctx.topology.joint_count() {
        return Err(Error::TopologyMismatch(format!(
            "{} has {} joint histograms",
            path.display(),
            file.map.joint_count()
        )));
    }
    Ok(file)
}

/// Dataset records plus the SHA-256 of the file they came from.
fn read_with_digest(path: &Path, topo: &SkeletonTopology) -> Result<(Vec<DatasetRecord>, String)> {
    let text = read_to_string(path)?;
    Ok((read_dataset_nonempty(path, topo)?, file_digest(text.as_bytes())))
}

fn check_provenance(hist: &HistogramFile, hist_path: &Path, data_path: &Path, digest: &str) -> Result<()> {
    if hist.provenance.source_digest != digest {
        return Err(Error::InvalidValue(format!(
            "{} was not built from {}",
            hist_path.display(),
            data_path.display()
        )));
    }
    Ok(())
}

pub struct TrainInputs<'a> {
    pub generated: &'a Path,
    pub gt: Option<&'a Path>,
    pub hist_gt: Option<&'a Path>,
    pub hist_gen: Option<&'a Path>,
}

fn fit<T: Real>(
    ctx: &Context,
    generated: &[PosePair],
    gt: &[PosePair],
    hists: Option<(&HistogramMap, &HistogramMap)>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, LossTrace)> {
    let normalizer = InputNormalizer::for_camera(ctx.config.camera);
    let mut model = EstimatorModel::<T>::init(ctx.config.architecture, ctx.seed)?;
    let trace = match hists {
        Some((hg, hs)) => train(&mut model, generated, gt, hg, hs, &normalizer, cfg, &ctx.config.crm)?,
        None => {
            // No ground truth, so the weights never enter the loss.
            let crm = CrmConfig {
                unit_weights: true,
                ..ctx.config.crm
            };
            let empty = HistogramMap {
                bin_count: 1,
                epsilon: 0.0,
                source: String::new(),
                sample_count: 0,
                joints: Vec::new(),
            };
            train(&mut model, generated, gt, &empty, &empty, &normalizer, cfg, &crm)?
        }
    };
    let ckpt = Checkpoint::from_model(&model, normalizer, ctx.digest(), cfg.precision);
    Ok((ckpt, trace))
}

pub fn train_cmd(ctx: &Context, inputs: &TrainInputs) -> Result<PathBuf> {
    let topo = &ctx.topology;
    let arch = ctx.config.architecture;
    if arch.joints != topo.joint_count() {
        return Err(Error::InvalidConfig {
            field: "architecture.joints".into(),
            reason: format!("the skeleton has {} joints", topo.joint_count()),
        });
    }
    let cfg = TrainConfig {
        rng_seed: ctx.seed,
        ..ctx.config.train
    };
    let given = [inputs.gt, inputs.hist_gt, inputs.hist_gen].iter().filter(|p| p.is_some()).count();
    if given != 0 && given != 3 {
        return Err(Error::InvalidConfig {
            field: "--gt, --hist-gt, --hist-gen".into(),
            reason: "give all three or none".into(),
        });
    }
    if given == 0 && cfg.lambda_co > 0.0 {
        return Err(Error::InvalidConfig {
            field: "train.lambda_co".into(),
            reason: "is positive but no ground-truth data was given".into(),
        });
    }

    // Every input is parsed and checked before any training starts.
    let (gen_records, gen_digest) = read_with_digest(inputs.generated, topo)?;
    let generated: Vec<PosePair> = gen_records.iter().map(|r| r.pair(topo)).collect::<Result<_>>()?;
    let mut gt = Vec::new();
    let mut hists = None;
    if let (Some(gt_path), Some(hg_path), Some(hs_path)) = (inputs.gt, inputs.hist_gt, inputs.hist_gen) {
        let hist_gt = read_histogram(hg_path, ctx)?;
        let hist_gen = read_histogram(hs_path, ctx)?;
        let (gt_records, gt_digest) = read_with_digest(gt_path, topo)?;
        check_provenance(&hist_gt, hg_path, gt_path, &gt_digest)?;
        check_provenance(&hist_gen, hs_path, inputs.generated, &gen_digest)?;
        let keep: BTreeSet<u64> = hist_gt.provenance.frame_ids.iter().copied().collect();
        gt = gt_records
            .iter()
            .filter(|r| keep.contains(&r.frame_id))
            .map(|r| r.pair(topo))
            .collect::<Result<_>>()?;
        hists = Some((hist_gt.map, hist_gen.map));
    }
    let hists = hists.as_ref().map(|(a, b)| (a, b));

    let (ckpt, trace) = match cfg.precision {
        Precision::F32 => fit::<f32>(ctx, &generated, &gt, hists, &cfg)?,
        Precision::F64 => fit::<f64>(ctx, &generated, &gt, hists, &cfg)?,
    };
    let dir = ctx.out_path("train");
    write_atomic(&dir.join("checkpoint.json"), ckpt.to_json()?.as_bytes())?;
    let csv = format!("# topology {}\n{}", ctx.digest(), trace.to_csv());
    write_atomic(&dir.join("trace.csv"), csv.as_bytes())?;
    let last = trace.last().expect("trace has the epoch-0 row");
    println!(
        "epoch {}: l_p {:.6} l_co {:.6} l_a {:.6} ({} generated, {} gt) -> {}",
        last.epoch,
        last.pose,
        last.counterfactual,
        last.total,
        generated.len(),
        gt.len(),
        dir.display()
    );
    Ok(dir)
}

pub fn eval_cmd(ctx: &Context, checkpoint: &Path, test: &Path) -> Result<PathBuf> {
    let text = read_to_string(checkpoint)?;
    let ckpt = Checkpoint::from_json(&text)?;
    ckpt.check_topology(&ctx.digest())?;
    let records = read_dataset_nonempty(test, &ctx.topology)?;
    let root = ctx.topology.root();
    let inputs: Vec<Pose2D> = records.iter().map(|r| r.pose2d()).collect::<Result<_>>()?;
    let targets: Vec<Pose3D> = records.iter().map(|r| Ok(r.pose3d()?.root_relative(root))).collect::<Result<_>>()?;
    let actions: Vec<String> = records.iter().map(|r| r.action.clone()).collect();
    let preds = match ckpt.precision {
        Precision::F32 => predict(&ckpt.to_model::<f32>()?, &ckpt.normalizer, &inputs)?,
        Precision::F64 => predict(&ckpt.to_model::<f64>()?, &ckpt.normalizer, &inputs)?,
    };
    let report = evaluate(&preds, &targets, &actions, root)?;
    let file = EvalFile {
        format_version: ARTIFACT_VERSION,
        topology: ctx.digest(),
        checkpoint_digest: file_digest(text.as_bytes()),
        report,
    };
    let out = ctx.out_path("eval.json");
    write_atomic(&out, to_json_pretty(&file)?.as_bytes())?;
    print!("{}", file.report.to_table());
    Ok(out)
}

const PLOT_AXES: [&str; 5] = ["u", "v", "x", "y", "z"];

/// Image coordinates and root-relative 3D position of one joint per record.
fn joint_samples(records: &[DatasetRecord], joint: usize, root: usize) -> Vec<[f64; 5]> {
    records
        .iter()
        .map(|r| {
            let (p, q, o) = (r.joints2d[joint], r.joints3d[joint], r.joints3d[root]);
            [p[0], p[1], q[0] - o[0], q[1] - o[1], q[2] - o[2]]
        })
        .collect()
}

fn points_csv(digest: &str, records: &[DatasetRecord], samples: &[[f64; 5]]) -> String {
    let mut s = format!("# topology {digest}\nframe_id,action,{}\n", PLOT_AXES.join(","));
    for (r, p) in records.iter().zip(samples) {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.frame_id, r.action, p[0], p[1], p[2], p[3], p[4]);
    }
    s
}

/// Counts of `values` in `bins` equal bins over `[lo, hi]`; the top edge is inclusive.
fn bin_counts(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut c = vec![0; bins];
    for v in values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        c[k.min(bins - 1)] += 1;
    }
    c
}

pub fn plot_dist_cmd(ctx: &Context, a: &Path, b: &Path, joint: usize, bins: usize) -> Result<PathBuf> {
    let j = ctx.topology.joint_count();
    if joint >= j {
        return Err(Error::InvalidConfig {
            field: "--joint".into(),
            reason: format!("{joint} is out of range for a {j}-joint skeleton"),
        });
    }
    if bins == 0 {
        return Err(Error::InvalidConfig {
            field: "--bins".into(),
            reason: "must be at least 1".into(),
        });
    }
    let ra = read_dataset(a, &ctx.topology)?;
    let rb = read_dataset(b, &ctx.topology)?;
    let root = ctx.topology.root();
    let (sa, sb) = (joint_samples(&ra, joint, root), joint_samples(&rb, joint, root));

    let digest = ctx.digest();
    let mut marg = format!("# topology {digest}\naxis,bin,lo,hi,count_a,count_b\n");
    for (k, axis) in PLOT_AXES.iter().enumerate() {
        let all = sa.iter().chain(&sb).map(|p| p[k]);
        let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !(lo < hi) {
            // Empty or constant: a unit-wide range around the value.
            let c = if lo.is_finite() { lo } else { 0.0 };
            (lo, hi) = (c - 0.5, c + 0.5);
        }
        let ca = bin_counts(sa.iter().map(|p| p[k]), lo, hi, bins);
        let cb = bin_counts(sb.iter().map(|p| p[k]), lo, hi, bins);
        let w = (hi - lo) / bins as f64;
        for i in 0..bins {
            let e0 = lo + w * i as f64;
            let e1 = if i + 1 == bins { hi } else { lo + w * (i + 1) as f64 };
            let _ = writeln!(marg, "{axis},{i},{e0},{e1},{},{}", ca[i], cb[i]);
        }
    }
    let dir = ctx.out_path("plot");
    write_atomic(&dir.join("points_a.csv"), points_csv(&digest, &ra, &sa).as_bytes())?;
    write_atomic(&dir.join("points_b.csv"), points_csv(&digest, &rb, &sb).as_bytes())?;
    write_atomic(&dir.join("marginals.csv"), marg.as_bytes())?;
    println!(
        "joint {joint} ({}): {} and {} points -> {}",
        ctx.topology.joint_names()[joint],
        ra.len(),
        rb.len(),
        dir.display()
    );
    Ok(dir)
}

pub fn synthetic_cmd(ctx: &Context) -> Result<PathBuf> {
    let cfg = SyntheticConfig {
        rng_seed: ctx.seed,
        ..ctx.config.synthetic.clone()
    };
    let b = build_benchmark(&cfg)?;
    if b.topology.digest() != ctx.digest() {
        return Err(Error::TopologyMismatch(
            "the synthetic benchmark uses the built-in 17-joint skeleton".into(),
        ));
    }
    let cam = &ctx.config.camera;
    let topo = &b.topology;
    let dir = ctx.out_path("synthetic");
    let seed_ids: Vec<u64> = (0..b.seeds.len() as u64).collect();
    let files = [
        ("seeds.jsonl", records_from_poses(&b.seeds, &seed_ids, cam, topo, Source::Gt)?),
        ("generated.jsonl", records_from_sequences(&b.generated, cam, topo, Source::Generated)?),
        ("gt.jsonl", records_from_sequences(&b.gt, cam, topo, Source::Gt)?),
        ("test.jsonl", records_from_sequences(&b.test, cam, topo, Source::Gt)?),
    ];
    for (name, records) in &files {
        write_dataset(&dir.join(name), records)?;
        println!("{name}: {} records", records.len());
        print_counts(&count_by_action(records.iter().map(|r| r.action.as_str())));
    }
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExperimentKind {
    Sweep,
    Ablation,
}

pub fn experiment_cmd(ctx: &Context, spec_file: &Path, kind: ExperimentKind) -> Result<PathBuf> {
    let text = read_to_string(spec_file)?;
    let spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
        field: spec_file.display().to_string(),
        reason: e.to_string(),
    })?;
    let data = prepare_benchmark(&spec)?;
    let dir = ctx.out_path("experiments");
    match kind {
        ExperimentKind::Sweep => {
            let r = run_fraction_sweep(&data, &spec)?;
            r.write(&dir)?;
            print!("{}", r.to_csv());
            println!("spearman(fraction, mpjpe) = {:.3}", r.trend_spearman);
        }
        ExperimentKind::Ablation => {
            let r = run_crm_ablation(&data, &spec)?;
            r.write(&dir)?;
            print!("{}", r.to_csv());
            println!("weighted arm wins {} of {}", r.treatment_wins, r.pairs.len());
        }
    }
    Ok(dir.join(&spec.name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_counts_cover_every_value() {
        let v = [0.0, 0.25, 0.5, 0.99, 1.0];
        let c = bin_counts(v.iter().copied(), 0.0, 1.0, 4);
        assert_eq!(c, vec![1, 1, 1, 2]);
        assert_eq!(c.iter().sum::<usize>(), v.len());
    }
}
