//! Structured probabilistic polylines for online map generation.
//!
//! Map elements are Gaussians over flattened polylines whose covariance is
//! low-rank plus diagonal. The crate provides the likelihood kernels, a
//! curriculum fitter, feature encoding for downstream predictors, a
//! synthetic data generator and the map/trajectory evaluation metrics.

pub mod calib;
pub mod cli;
pub mod encoding;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod lrpd;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{ClassProbs, MapClass, Polyline, Scenario};
pub use lrpd::{CapacitanceFactor, LrpdParams, NllGrad, ParamCount};
