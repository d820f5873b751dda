use thiserror::Error;

/// Errors produced by the solvers and experiments.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(
        "weighted projection did not converge after {iterations} iterations \
         (last step {last_step:.3e}, condition number of R {condition_number:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        last_step: f64,
        condition_number: f64,
    },

    #[error("probe {index} is not a member of the constraint set (violation {violation:.3e})")]
    ProbeNotInSet { index: usize, violation: f64 },

    #[error("control is not feasible (violation {violation:.3e})")]
    ControlNotFeasible { violation: f64 },

    #[error("R + D'PD lost positive definiteness at node {node} (min eigenvalue {min_eigenvalue:.3e})")]
    SingularInnerMatrix { node: usize, min_eigenvalue: f64 },

    #[error("{mass:.3e} of the quadrature mass left the lattice at step {step}")]
    LatticeTooNarrow { step: usize, mass: f64 },

    #[error("state became non-finite at step {step} on path {path}")]
    NonFiniteState { step: usize, path: usize },

    #[error("regression at node {node} produced non-finite coefficients")]
    RegressionRankDeficient { node: usize },

    #[error("Picard iteration did not converge in {} iterations (last change {:.3e})", .log.len(), .log.last().copied().unwrap_or(f64::NAN))]
    NotConverged { log: Vec<f64> },

    #[error("mean-field fixed point did not converge in {} outer iterations (last residual {:.3e})", .history.len(), .history.last().copied().unwrap_or(f64::NAN))]
    OuterNotConverged { history: Vec<f64> },

    #[error("inner solve failed at outer iteration {outer}: {source}")]
    Inner { outer: usize, source: Box<Error> },

    #[error("solutions were computed on different noise banks or grids")]
    MismatchedNoise,

    #[error("deviation control left the constraint set at step {step} (violation {violation:.3e})")]
    InfeasibleDeviation { step: usize, violation: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
