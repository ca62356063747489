//! Conditional signed-distance shape priors learned from silhouettes,
//! differentiable slice rendering for subject-specific fitting, and
//! velocity-field propagation for temporally consistent meshes.

pub mod config;
pub mod csdf;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod motion;
pub mod render;
pub mod shapegen;

pub use error::{CoreError, Result};
