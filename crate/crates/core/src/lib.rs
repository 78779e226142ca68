//! Statistical energy control for quadratic energy-conserving systems.
//!
//! The pipeline drives an ensemble away from equilibrium with a constant
//! forcing perturbation, solves the optimal control of the total statistical
//! energy, recovers the forcing perturbation that realizes that control, and
//! checks the result on Monte Carlo runs.

pub mod config;
pub mod control;
mod csvio;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod inversion;
pub mod response;
pub mod system;

pub use error::{Error, Result};
