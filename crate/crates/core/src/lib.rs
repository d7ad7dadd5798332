//! Gaussian-process regression for sparse spatio-temporal sensor networks.

pub mod data;
pub mod error;
pub mod eval;
pub mod exact_gp;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod prediction;
pub mod statespace;
pub mod svgp;

pub use error::{GpError, Result};
pub use exact_gp::GpModel;
pub use kernels::KernelSpec;
pub use prediction::PosteriorPrediction;
