pub mod calibration;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod kernels;
pub mod measure;
pub mod quad;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use measure::{Dimension, DiscreteMeasure};
pub use simulate::{ParticleState, Scheme, SimConfig};
pub use stats::{EstimateWithCI, TestReport};
