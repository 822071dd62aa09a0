//! Diffusion tensor smoothing toolkit: SPD geometry, weighted means,
//! synthetic phantoms and noise, DWI regression, Rician statistics,
//! kernel smoothing under three metrics and perturbation checks.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod io;
pub mod karcher;
pub mod linalg;
pub mod noise;
pub mod perturbation;
pub mod phantom;
pub mod quadrature;
pub mod regression;
pub mod rician;
pub mod rng;
pub mod smoothing;
pub mod spd;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use spd::{Metric, SpdTensor, SymMatrix};
