//! Command-line front end: argument parsing, configuration, artifact files.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use posegu::{Error, ErrorKind, Result};

use commands::{Context, ExperimentKind, TrainInputs};
use config::PipelineConfig;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Pose generation, propensity-weighted training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "posegu", version)]
pub struct Cli {
    /// Pipeline configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured rng_seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or output directory for verbs that write several files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-action angle ranges and bone-length templates from seed poses.
    ExtractRanges { seeds: PathBuf },
    /// Synthetic training set from a ranges file.
    Generate { ranges: PathBuf },
    /// Per-joint 2D histograms of a random fraction of a dataset.
    Histogram {
        dataset: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Train the lifting network; writes checkpoint.json and trace.csv.
    Train {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        hist_gt: Option<PathBuf>,
        #[arg(long)]
        hist_gen: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a test dataset.
    Eval { checkpoint: PathBuf, test: PathBuf },
    /// Point clouds and per-axis marginals of one joint from two datasets.
    PlotDist {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        joint: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Seed, generated, ground-truth and test sets of the synthetic benchmark.
    Synthetic,
    /// Run an experiment spec (JSON).
    Experiment {
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "sweep")]
        kind: ExperimentKind,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

/// Caps the global thread pool at `POSEGU_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("POSEGU_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Error::InvalidConfig {
        field: "POSEGU_THREADS".into(),
        reason: format!("{v:?} is not a positive integer"),
    })?;
    // Fails only if a pool already exists, e.g. when called twice in tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    init_threads()?;
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ctx = Context::new(config, cli.seed, cli.out)?;
    match cli.command {
        Command::ExtractRanges { seeds } => commands::extract_ranges_cmd(&ctx, &seeds),
        Command::Generate { ranges } => commands::generate_cmd(&ctx, &ranges),
        Command::Histogram { dataset, fraction } => commands::histogram_cmd(&ctx, &dataset, fraction),
        Command::Train {
            generated,
            gt,
            hist_gt,
            hist_gen,
        } => commands::train_cmd(
            &ctx,
            &TrainInputs {
                generated: &generated,
                gt: gt.as_deref(),
                hist_gt: hist_gt.as_deref(),
                hist_gen: hist_gen.as_deref(),
            },
        ),
        Command::Eval { checkpoint, test } => commands::eval_cmd(&ctx, &checkpoint, &test),
        Command::PlotDist { a, b, joint, bins } => commands::plot_dist_cmd(&ctx, &a, &b, joint, bins),
        Command::Synthetic => commands::synthetic_cmd(&ctx),
        Command::Experiment { spec, kind } => commands::experiment_cmd(&ctx, &spec, kind),
    }
}
