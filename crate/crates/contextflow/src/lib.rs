//! Trajectory inference for longitudinal spatial omics data: prior-regularized
//! entropic optimal-transport couplings driving conditional flow matching, with
//! ODE-based sampling and a two-sample evaluation metric suite.

pub mod assignment;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod sampler;
pub mod slice;
pub mod trainer;
pub mod transport;
pub mod velocity;

pub use error::{Error, Result};
pub use slice::{LongitudinalDataset, SpatialSlice};
