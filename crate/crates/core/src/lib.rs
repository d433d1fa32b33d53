//! Kinematic pose synthesis, histogram propensities and cIPS-weighted training
//! for 2D-to-3D human pose lifting.

pub mod camera;
pub mod crm;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod kinematics;
pub mod metrics;
pub mod posegen;
pub mod propensity;
pub mod skeleton;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
