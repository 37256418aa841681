//! Relaxed rotation-equivariant group convolutions over C4 in pure Rust.
//!
//! Filters are expanded into four rotated copies by bilinear resampling with
//! learnable perturbed affine matrices; with zero perturbation the layers are
//! exactly C4-equivariant.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod group;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod record;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use group::{PerturbationDelta, C4};
pub use tensor::{Precision, Scalar, Tensor};
