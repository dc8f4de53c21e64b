//! Mixed-precision bit-width allocation from measured cross-layer
//! sensitivities.
//!
//! The pipeline is: a [`LossOracle`](oracles::LossOracle) exposes the loss of
//! a model under per-layer weight perturbations; [`sensitivity`] turns it into
//! a sensitivity matrix over (layer, bit-width) pairs; [`spectra`] projects
//! that matrix onto the PSD cone; [`solver`] picks one bit-width per layer
//! under a model-size budget.

pub mod container;
pub mod error;
pub mod linalg;
pub mod oracles;
pub mod quantizer;
pub mod sensitivity;
pub mod solver;
pub mod spectra;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use sensitivity::{BitMenu, SensitivityMatrix};
