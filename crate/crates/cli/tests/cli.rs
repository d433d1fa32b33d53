use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::Vector3;
use posegu::camera::CameraIntrinsics;
use posegu::dataset::{records_from_poses, to_jsonl, DatasetRecord, Source};
use posegu::estimator::{Architecture, Checkpoint, EstimatorModel};
use posegu::kinematics::forward_kinematics;
use posegu::propensity::build_histogram;
use posegu::skeleton::{AngleMatrix, Pose2D, Pose3D, SkeletonTopology};
use posegu_cli::config::{EvalFile, HistogramFile, RangesFile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn posegu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posegu"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = posegu(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = posegu(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// `per_action` FK poses for each action, small random angles.
fn seed_records(actions: &[&str], per_action: usize, seed: u64) -> Vec<DatasetRecord> {
    let topo = SkeletonTopology::human36m();
    let lengths = SkeletonTopology::human36m_reference_lengths();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses: Vec<(Pose3D, String)> = Vec::new();
    for a in actions {
        for _ in 0..per_action {
            let angles = AngleMatrix::new(
                (0..16)
                    .map(|_| [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)])
                    .collect(),
            )
            .unwrap();
            let p = forward_kinematics(&angles, &lengths, Vector3::new(0.0, 0.0, 4500.0), &topo).unwrap();
            poses.push((p, a.to_string()));
        }
    }
    let ids: Vec<u64> = (0..poses.len() as u64).collect();
    records_from_poses(&poses, &ids, &CameraIntrinsics::default(), &topo, Source::Gt).unwrap()
}

fn write_seeds(dir: &Path, name: &str, actions: &[&str], per_action: usize) {
    fs::write(dir.join(name), to_jsonl(&seed_records(actions, per_action, 1)).unwrap()).unwrap();
}

fn write_config(dir: &Path, json: &str) {
    fs::write(dir.join("config.json"), json).unwrap();
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn extract_ranges_gives_one_profile_per_action() {
    let d = TempDir::new().unwrap();
    write_seeds(d.path(), "seeds.jsonl", &["walk", "sit", "wave"], 20);
    let stdout = ok(d.path(), &["--out", "r.json", "extract-ranges", "seeds.jsonl"]);
    let r: RangesFile = serde_json::from_str(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r.profiles.len(), 3);
    assert_eq!(r.seed_counts.values().copied().collect::<Vec<_>>(), vec![20, 20, 20]);
    assert!(stdout.contains("walk: 20"));
    assert_eq!(r.topology, SkeletonTopology::human36m().digest());

    let first = fs::read(d.path().join("r.json")).unwrap();
    ok(d.path(), &["--out", "r.json", "extract-ranges", "seeds.jsonl"]);
    assert_eq!(fs::read(d.path().join("r.json")).unwrap(), first);
}

#[test]
fn malformed_seed_line_is_reported_by_number() {
    let d = TempDir::new().unwrap();
    write_seeds(d.path(), "seeds.jsonl", &["walk"], 10);
    let text = fs::read_to_string(d.path().join("seeds.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[6] = "{\"frame_id\": 6, \"oops\"";
    fs::write(d.path().join("seeds.jsonl"), lines.join("\n")).unwrap();
    let (code, err) = fails(d.path(), &["extract-ranges", "seeds.jsonl"]);
    assert_eq!(code, 3);
    assert!(err.contains("seeds.jsonl:7:"), "{err}");
}

#[test]
fn missing_file_and_bad_config_have_distinct_exit_codes() {
    let d = TempDir::new().unwrap();
    let (code, err) = fails(d.path(), &["extract-ranges", "nope.jsonl"]);
    assert_eq!(code, 3);
    assert!(err.contains("nope.jsonl"));

    write_config(d.path(), r#"{"generator": {"keyframes": 1}}"#);
    let (code, err) = fails(d.path(), &["--config", "config.json", "extract-ranges", "nope.jsonl"]);
    assert_eq!(code, 2);
    assert!(err.contains("generator.keyframes"), "{err}");

    let (code, _) = fails(d.path(), &["no-such-verb"]);
    assert_eq!(code, 2);
}

#[test]
fn generate_line_counts() {
    let d = TempDir::new().unwrap();
    write_seeds(d.path(), "one.jsonl", &["walk"], 5);
    ok(d.path(), &["--out", "one.json", "extract-ranges", "one.jsonl"]);
    write_config(d.path(), r#"{"generator": {"keyframes": 2, "inter_frames": 1, "sequences_per_action": 1}}"#);
    ok(d.path(), &["--config", "config.json", "--out", "g.jsonl", "generate", "one.json"]);
    assert_eq!(line_count(&d.path().join("g.jsonl")), 2);

    write_seeds(d.path(), "three.jsonl", &["a", "b", "c"], 5);
    ok(d.path(), &["--out", "three.json", "extract-ranges", "three.jsonl"]);
    write_config(d.path(), r#"{"generator": {"keyframes": 5, "inter_frames": 10, "sequences_per_action": 4}}"#);
    let stdout = ok(d.path(), &["--config", "config.json", "--out", "g.jsonl", "generate", "three.json"]);
    // 3 actions x 4 sequences x (5 keyframes x 10 frames)
    assert_eq!(line_count(&d.path().join("g.jsonl")), 3 * 4 * 5 * 10);
    assert!(stdout.contains("600 frames"));

    let first = fs::read(d.path().join("g.jsonl")).unwrap();
    ok(d.path(), &["--config", "config.json", "--out", "g.jsonl", "generate", "three.json"]);
    assert_eq!(fs::read(d.path().join("g.jsonl")).unwrap(), first);
    ok(d.path(), &["--config", "config.json", "--seed", "9", "--out", "g9.jsonl", "generate", "three.json"]);
    assert_ne!(fs::read(d.path().join("g9.jsonl")).unwrap(), first);
}

#[test]
fn generate_rejects_foreign_ranges() {
    let d = TempDir::new().unwrap();
    write_seeds(d.path(), "s.jsonl", &["walk"], 5);
    ok(d.path(), &["--out", "r.json", "extract-ranges", "s.jsonl"]);
    let text = fs::read_to_string(d.path().join("r.json")).unwrap();
    let digest = SkeletonTopology::human36m().digest();
    fs::write(d.path().join("r.json"), text.replace(&digest, "00000000deadbeef")).unwrap();
    let (code, err) = fails(d.path(), &["generate", "r.json"]);
    assert_eq!(code, 3);
    assert!(err.contains("topology mismatch"), "{err}");
}

fn read_hist(path: &Path) -> HistogramFile {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn histogram_subsample_and_full_build() {
    let d = TempDir::new().unwrap();
    write_seeds(d.path(), "data.jsonl", &["a", "b"], 200);
    ok(d.path(), &["--out", "q.json", "histogram", "data.jsonl", "--fraction", "0.25"]);
    let q = read_hist(&d.path().join("q.json"));
    assert_eq!(q.map.sample_count, 100);
    assert_eq!(q.provenance.frame_ids.len(), 100);
    assert_eq!(q.provenance.fraction, 0.25);

    ok(d.path(), &["--out", "full.json", "histogram", "data.jsonl"]);
    let full = read_hist(&d.path().join("full.json"));
    let poses: Vec<Pose2D> = seed_records(&["a", "b"], 200, 1).iter().map(|r| r.pose2d().unwrap()).collect();
    let direct = build_histogram(&poses, full.map.bin_count, full.map.epsilon).unwrap();
    assert_eq!(full.map.joints, direct.joints);

    let again = fs::read(d.path().join("q.json")).unwrap();
    ok(d.path(), &["--out", "q.json", "histogram", "data.jsonl", "--fraction", "0.25"]);
    assert_eq!(fs::read(d.path().join("q.json")).unwrap(), again);

    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    let (code, _) = fails(d.path(), &["histogram", "empty.jsonl"]);
    assert_eq!(code, 3);
    let (code, _) = fails(d.path(), &["histogram", "data.jsonl", "--fraction", "0"]);
    assert_eq!(code, 2);
}

const SMALL: &str = r#"{
  "generator": { "keyframes": 4, "inter_frames": 5, "sequences_per_action": 5 },
  "histogram": { "bin_count": 8 },
  "architecture": { "hidden": 32, "blocks": 1 },
  "train": { "epochs": EPOCHS, "batch_size": 32, "lambda_co": LAMBDA, "precision": "f64" }
}"#;

/// Seeds, generated set, GT set and both histograms in `d`.
fn prepare_training(d: &Path, epochs: usize, lambda: f64) {
    write_config(d, &SMALL.replace("EPOCHS", &epochs.to_string()).replace("LAMBDA", &lambda.to_string()));
    write_seeds(d, "gt.jsonl", &["a", "b"], 40);
    let c = ["--config", "config.json"];
    ok(d, &[&c[..], &["--out", "r.json", "extract-ranges", "gt.jsonl"]].concat());
    ok(d, &[&c[..], &["--out", "gen.jsonl", "generate", "r.json"]].concat());
    ok(d, &[&c[..], &["--out", "hgt.json", "histogram", "gt.jsonl", "--fraction", "0.5"]].concat());
    ok(d, &[&c[..], &["--out", "hgen.json", "histogram", "gen.jsonl"]].concat());
}

const TRAIN_FULL: [&str; 9] = [
    "train", "--generated", "gen.jsonl", "--gt", "gt.jsonl", "--hist-gt", "hgt.json", "--hist-gen", "hgen.json",
];

#[test]
fn zero_epochs_writes_the_initial_model() {
    let d = TempDir::new().unwrap();
    prepare_training(d.path(), 0, 1.0);
    let stdout = ok(d.path(), &[&["--config", "config.json", "--out", "m"][..], &TRAIN_FULL[..]].concat());
    assert!(stdout.starts_with("epoch 0: l_p "), "{stdout}");
    let ckpt = Checkpoint::from_json(&fs::read_to_string(d.path().join("m/checkpoint.json")).unwrap()).unwrap();
    let arch = Architecture {
        hidden: 32,
        blocks: 1,
        ..Architecture::default()
    };
    let init = EstimatorModel::<f64>::init(arch, 0).unwrap();
    assert_eq!(ckpt.parameters, init.parameters());
    let trace = fs::read_to_string(d.path().join("m/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.lines().nth(1).unwrap() == "epoch,l_p,l_co,l_a");
}

fn trace_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn lambda_zero_matches_generated_only_training() {
    let d = TempDir::new().unwrap();
    prepare_training(d.path(), 3, 0.0);
    ok(d.path(), &[&["--config", "config.json", "--out", "with"][..], &TRAIN_FULL[..]].concat());
    ok(d.path(), &["--config", "config.json", "--out", "without", "train", "--generated", "gen.jsonl"]);
    let a = trace_rows(&d.path().join("with/trace.csv"));
    let b = trace_rows(&d.path().join("without/trace.csv"));
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        // epoch, l_p and l_a agree exactly; l_co is only measured when GT is given.
        assert_eq!((x[0], x[1], x[3]), (y[0], y[1], y[3]));
        assert!(x[2] > 0.0 && y[2] == 0.0);
    }
    assert_eq!(
        fs::read(d.path().join("with/checkpoint.json")).unwrap(),
        fs::read(d.path().join("without/checkpoint.json")).unwrap()
    );
}

#[test]
fn train_is_seeded_and_checks_inputs() {
    let d = TempDir::new().unwrap();
    prepare_training(d.path(), 1, 1.0);
    let run = |out: &str, seed: &str| {
        ok(d.path(), &[&["--config", "config.json", "--seed", seed, "--out", out][..], &TRAIN_FULL[..]].concat());
        fs::read(d.path().join(out).join("checkpoint.json")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));

    // GT histogram built from another file.
    let (code, err) = fails(
        d.path(),
        &["--config", "config.json", "train", "--generated", "gen.jsonl", "--gt", "gt.jsonl", "--hist-gt", "hgen.json", "--hist-gen", "hgen.json"],
    );
    assert_eq!(code, 3);
    assert!(err.contains("was not built from"), "{err}");
    // Positive lambda with no GT.
    let (code, _) = fails(d.path(), &["--config", "config.json", "train", "--generated", "gen.jsonl"]);
    assert_eq!(code, 2);
}

#[test]
fn eval_reports_and_rejects() {
    let d = TempDir::new().unwrap();
    prepare_training(d.path(), 1, 1.0);
    ok(d.path(), &[&["--config", "config.json", "--out", "m"][..], &TRAIN_FULL[..]].concat());
    let stdout = ok(d.path(), &["--out", "e.json", "eval", "m/checkpoint.json", "gt.jsonl"]);
    assert!(stdout.contains("MPJPE") && stdout.contains("all"));
    let e: EvalFile = serde_json::from_str(&fs::read_to_string(d.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(e.report.overall.sample_count, 80);
    assert_eq!(e.report.per_action.len(), 2);
    assert!(e.report.overall.mpjpe > 0.0);

    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    let (code, err) = fails(d.path(), &["eval", "m/checkpoint.json", "empty.jsonl"]);
    assert_eq!(code, 3);
    assert!(err.contains("empty"), "{err}");

    let text = fs::read_to_string(d.path().join("m/checkpoint.json")).unwrap();
    fs::write(d.path().join("v2.json"), text.replace("\"format_version\":1", "\"format_version\":2")).unwrap();
    let (code, err) = fails(d.path(), &["eval", "v2.json", "gt.jsonl"]);
    assert_eq!(code, 3);
    assert!(err.contains("version 2"), "{err}");

    fs::write(d.path().join("junk.json"), "not json").unwrap();
    let (code, _) = fails(d.path(), &["eval", "junk.json", "gt.jsonl"]);
    assert_eq!(code, 3);
}

#[test]
fn plot_dist_outputs() {
    let d = TempDir::new().unwrap();
    write_seeds(d.path(), "a.jsonl", &["x", "y"], 30);
    fs::copy(d.path().join("a.jsonl"), d.path().join("b.jsonl")).unwrap();
    ok(d.path(), &["--out", "p", "plot-dist", "a.jsonl", "b.jsonl", "--joint", "13", "--bins", "10"]);
    let pa = fs::read(d.path().join("p/points_a.csv")).unwrap();
    assert_eq!(pa, fs::read(d.path().join("p/points_b.csv")).unwrap());
    assert_eq!(String::from_utf8(pa).unwrap().lines().count(), 2 + 60);

    let marg = fs::read_to_string(d.path().join("p/marginals.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::new();
    for l in marg.lines().skip(2) {
        let f: Vec<&str> = l.split(',').collect();
        let e = sums.entry(f[0].to_string()).or_insert((0usize, 0usize));
        e.0 += f[4].parse::<usize>().unwrap();
        e.1 += f[5].parse::<usize>().unwrap();
    }
    assert_eq!(sums.len(), 5);
    assert!(sums.values().all(|&(a, b)| a == 60 && b == 60));

    let (code, err) = fails(d.path(), &["plot-dist", "a.jsonl", "b.jsonl", "--joint", "17"]);
    assert_eq!(code, 2);
    assert!(err.contains("--joint"), "{err}");
}

#[test]
fn synthetic_sets_round_trip_through_the_reader() {
    let d = TempDir::new().unwrap();
    write_config(
        d.path(),
        r#"{"synthetic": {"seeds_per_action": 6, "generated_frames": 200, "gt_frames": 100, "test_frames": 100}}"#,
    );
    ok(d.path(), &["--config", "config.json", "--out", "s", "synthetic"]);
    let topo = SkeletonTopology::human36m();
    for (name, n) in [("seeds", 6), ("generated", 200), ("gt", 100), ("test", 100)] {
        let recs = posegu::dataset::read_dataset(&d.path().join(format!("s/{name}.jsonl")), &topo).unwrap();
        assert_eq!(recs.len(), n, "{name}");
    }
}
