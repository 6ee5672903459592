//! Budgeted test-time search over diffusion trajectories with early pruning,
//! on a Gaussian-mixture toy process where every quantity is exact or
//! brute-forceable.

pub mod dynamics;
pub mod error;
pub mod harness;
mod io;
pub mod metrics;
pub mod par;
pub mod pool;
pub mod search;
pub mod seeds;
pub mod verifiers;

pub use error::{Error, Result};
