//! Rotation-equivariant magnitude/phase dual-stream speech enhancement.

pub mod autodiff;
pub mod conv;
pub mod cvar;
pub mod error;
pub mod hadf;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
