//! Simulation and numerical verification for the kinetic herding model.
//!
//! Agents carry a subjective price `x` and a favorability `v`; they are pulled
//! toward the ensemble mean price and toward each other through a
//! communication rate `phi`. The crate integrates the particle system, tracks
//! the energy and covariance functionals whose decay certifies herding, and
//! measures Wasserstein-1 distances between empirical measures.

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod functionals;
pub mod io;
pub mod kernel;
pub mod transport;

pub use error::{Error, Result};
