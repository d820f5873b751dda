//! Linear-quadratic mean-field games with closed convex control constraints.
//!
//! The crate solves the frozen-mean Hamiltonian forward-backward system by
//! regression Monte Carlo and damped Picard iteration, closes the mean-field
//! consistency loop, and runs finite-population experiments that measure how
//! fast the N-agent system approaches its mean-field limit.

pub mod convex_sets;
pub mod error;
pub mod fbsde;
pub mod linalg;
pub mod mean_field;
pub mod model;
pub mod oracles;
pub mod population;
pub mod rng;
pub mod stats;

pub use convex_sets::{characterization_residual, ConvexSet, WeightMatrix};
pub use error::{Error, Result};
