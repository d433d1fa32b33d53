//! Pipeline configuration and the on-disk artifact formats.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use posegu::camera::CameraIntrinsics;
use posegu::crm::CrmConfig;
use posegu::estimator::{Architecture, TrainConfig};
use posegu::metrics::EvalReport;
use posegu::posegen::{AngleRangeProfile, BoneLengthTemplateSet, GeneratorConfig};
use posegu::propensity::{HistogramConfig, HistogramMap};
use posegu::skeleton::SkeletonTopology;
use posegu::synthetic::SyntheticConfig;
use posegu::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ARTIFACT_VERSION: u32 = 1;

/// Everything a command needs besides its input files. Every field has a
/// default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Skeleton definition; the built-in 17-joint skeleton when absent.
    /// Relative paths resolve against the config file's directory.
    pub topology: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub camera: CameraIntrinsics,
    pub histogram: HistogramConfig,
    pub crm: CrmConfig,
    pub train: TrainConfig,
    pub architecture: Architecture,
    pub synthetic: SyntheticConfig,
    /// Output directory used when `--out` is not given.
    pub output_dir: PathBuf,
    /// Seed for every random choice a command makes; `--seed` overrides it.
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            topology: None,
            generator: GeneratorConfig::default(),
            camera: CameraIntrinsics::default(),
            histogram: HistogramConfig::default(),
            crm: CrmConfig::default(),
            train: TrainConfig::default(),
            architecture: Architecture::default(),
            synthetic: SyntheticConfig::default(),
            output_dir: PathBuf::from("out"),
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = posegu::dataset::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if let (Some(t), Some(dir)) = (&cfg.topology, path.parent()) {
            if t.is_relative() {
                cfg.topology = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.camera.validate()?;
        self.histogram.validate()?;
        self.crm.validate()?;
        self.train.validate()?;
        self.architecture.validate()?;
        self.synthetic.validate()
    }

    pub fn topology(&self) -> Result<SkeletonTopology> {
        match &self.topology {
            None => Ok(SkeletonTopology::human36m()),
            Some(p) => SkeletonTopology::from_json(&posegu::dataset::read_to_string(p)?),
        }
    }
}

/// Output of `extract-ranges`, input of `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangesFile {
    pub format_version: u32,
    pub topology: String,
    pub seed_counts: BTreeMap<String, usize>,
    pub profiles: Vec<AngleRangeProfile>,
    pub templates: BoneLengthTemplateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// File name only, so the artifact does not depend on the working directory.
    pub source_file: String,
    /// SHA-256 of the dataset file the histogram was built from.
    pub source_digest: String,
    pub fraction: f64,
    pub seed: u64,
    /// `frame_id`s of the records used; training reuses exactly these.
    pub frame_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramFile {
    pub format_version: u32,
    pub topology: String,
    pub provenance: Provenance,
    pub map: HistogramMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub format_version: u32,
    pub topology: String,
    pub checkpoint_digest: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rejects artifacts of another version or written for another skeleton.
pub fn check_artifact(what: &str, version: u32, topology: &str, expected: &str) -> Result<()> {
    if version != ARTIFACT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ARTIFACT_VERSION,
        });
    }
    if topology != expected {
        return Err(Error::TopologyMismatch(format!(
            "{what} was written for {topology}, expected {expected}"
        )));
    }
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_config() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn mismatched_artifact_is_rejected() {
        assert!(check_artifact("x", ARTIFACT_VERSION, "aa", "aa").is_ok());
        assert!(matches!(
            check_artifact("x", ARTIFACT_VERSION, "aa", "bb"),
            Err(Error::TopologyMismatch(_))
        ));
        assert!(matches!(
            check_artifact("x", 2, "aa", "aa"),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
