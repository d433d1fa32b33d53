use serde::{Deserialize, Serialize};

use super::model::{Architecture, EstimatorModel, Real};
use super::train::Precision;
use super::InputNormalizer;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized weights plus everything needed to rebuild the predictor.
/// Parameters are stored as f64 regardless of training precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub topology_digest: String,
    pub architecture: Architecture,
    pub normalizer: InputNormalizer,
    pub precision: Precision,
    pub parameters: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        model: &EstimatorModel<T>,
        normalizer: InputNormalizer,
        topology_digest: String,
        precision: Precision,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            topology_digest,
            architecture: *model.architecture(),
            normalizer,
            precision,
            parameters: model.parameters().iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<EstimatorModel<T>> {
        EstimatorModel::from_parameters(
            self.architecture,
            self.parameters.iter().map(|&p| T::of(p)).collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("format_version").and_then(|x| x.as_u64());
        if found != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version {
                found: found.map(|f| f.min(u32::MAX as u64) as u32).unwrap_or(0),
                expected: CHECKPOINT_VERSION,
            });
        }
        let c: Checkpoint = serde_json::from_value(v)?;
        if c.parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(c)
    }

    pub fn check_topology(&self, digest: &str) -> Result<()> {
        if self.topology_digest != digest {
            return Err(Error::TopologyMismatch(format!(
                "checkpoint built for {}, data uses {}",
                self.topology_digest, digest
            )));
        }
        Ok(())
    }
}
