//! Subspace-minimization reconstruction for the radiative transport equation.

pub mod error;
pub mod experiments;
pub mod grid;
pub mod medium;
pub mod operators;
pub mod par;
pub mod recon;
pub mod spectral;
pub mod transport;

pub use error::{Error, Result};
