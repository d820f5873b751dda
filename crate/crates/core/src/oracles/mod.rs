//! Independent reference solvers: the Riccati system for unconstrained
//! problems and a lattice dynamic program for scalar constrained ones.

pub mod dp;
pub mod riccati;

pub use dp::{solve_dp_1d, DpTable, Lattice};
pub use riccati::{riccati_fixed_point, solve_discrete_riccati, solve_riccati, RiccatiSolution};
