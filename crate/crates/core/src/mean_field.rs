//! The mean-field consistency fixed point `z = E x`.

use crate::error::{Error, Result};
use crate::fbsde::{euler_step, picard_solve_from, FbsdeSolution, NoiseBank, PathEnsemble, PicardConfig};
use crate::linalg::norm;
use crate::model::Model;
use crate::stats::mean_stderr;

/// Deterministic mean path on the time grid, node-major with `n` components
/// per node.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPath {
    n: usize,
    values: Vec<f64>,
}

impl MeanPath {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.is_empty() || values.len() % n != 0 {
            return Err(Error::ShapeMismatch(format!(
                "mean path of length {} is not a whole number of {n}-vectors",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mean path has non-finite entries".into()));
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize, nodes: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * nodes],
        }
    }

    /// The same vector at every node.
    pub fn constant(value: &[f64], nodes: usize) -> Self {
        Self {
            n: value.len(),
            values: value.repeat(nodes),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// `max_k |self_k − other_k|_∞`.
    pub fn max_abs_diff(&self, other: &MeanPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    /// Outer damping `ρ ∈ (0, 1]`.
    pub rho: f64,
    /// Stopping tolerance on `max_k |z⁽ʳ⁺¹⁾_k − z⁽ʳ⁾_k|`.
    pub tol_z: f64,
    pub max_outer: usize,
    pub inner: PicardConfig,
}

impl FixedPointConfig {
    /// Defaults with `tol_z = 1e-4 (1 + |x0|)`.
    pub fn for_model(model: &Model, inner: PicardConfig) -> Self {
        Self {
            rho: 0.5,
            tol_z: 1e-4 * (1.0 + norm(model.x0())),
            max_outer: 100,
            inner,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidInput(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.tol_z > 0.0 && self.tol_z.is_finite()) {
            return Err(Error::InvalidInput(format!("tol_z must be positive, got {}", self.tol_z)));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidInput("max_outer must be positive".into()));
        }
        self.inner.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointDiagnostics {
    /// `max_k |z⁽ʳ⁺¹⁾_k − z⁽ʳ⁾_k|` for each outer iteration.
    pub history: Vec<f64>,
    /// Picard iterations used by each inner solve, the final solve last.
    pub inner_iterations: Vec<usize>,
    /// `max_k |z*_k − mean(x_k)|` for the final solve at `z*`.
    pub consistency_residual: f64,
    /// Standard error of the sample mean of `x_k`, maximised over components.
    pub mean_stderr: Vec<f64>,
}

/// Euler recursion for the mean `m_{k+1} = m_k + (A m_k + B ū_k + F m_k + b)dt`
/// with `m_0 = x0` and per-node mean controls `ū_k` (node-major).
pub fn euler_mean_path(model: &Model, mean_controls: &[f64]) -> MeanPath {
    let (n, m) = (model.n(), model.m());
    let steps = model.grid().steps();
    let mut values = Vec::with_capacity((steps + 1) * n);
    values.extend_from_slice(model.x0());
    let mut next = vec![0.0; n];
    for k in 0..steps {
        let cur = &values[k * n..(k + 1) * n];
        euler_step(model, k, cur, &mean_controls[k * m..(k + 1) * m], cur, 0.0, &mut next);
        values.extend_from_slice(&next);
    }
    MeanPath::new(n, values).expect("finite mean path")
}

/// The mean of the uncontrolled-by-the-game system `u ≡ P_Γ^R[0]`.
pub fn initial_mean_path(model: &Model) -> Result<MeanPath> {
    let steps = model.grid().steps();
    let mut u = Vec::with_capacity(steps * model.m());
    for k in 0..steps {
        u.extend(model.zero_control(k)?);
    }
    Ok(euler_mean_path(model, &u))
}

fn sample_mean_path(model: &Model, ensemble: &PathEnsemble) -> MeanPath {
    let mut mean = ensemble.mean_path().into_vec();
    // The initial state is deterministic.
    mean[..model.n()].copy_from_slice(model.x0());
    MeanPath::new(model.n(), mean).expect("finite ensemble")
}

fn node_stderr(ensemble: &PathEnsemble) -> Vec<f64> {
    let n = ensemble.n;
    let mut col = vec![0.0; ensemble.paths];
    (0..=ensemble.steps)
        .map(|k| {
            let xs = ensemble.node_states(k);
            (0..n)
                .map(|i| {
                    for (j, c) in col.iter_mut().enumerate() {
                        *c = xs[j * n + i];
                    }
                    mean_stderr(&col).1
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Damped fixed-point iteration `z ← (1 − ρ)z + ρ·mean(x[z])` from the
/// mean of the `u ≡ P_Γ^R[0]` system, all inner solves on the same noise.
/// Each inner Picard solve starts from the previous solve's controls; after
/// the outer loop stops, one more inner solve at `z*` yields the returned
/// solution and the consistency residual.
pub fn fixed_point_solve(
    model: &Model,
    config: &FixedPointConfig,
    noise: &NoiseBank,
) -> Result<(MeanPath, FbsdeSolution, FixedPointDiagnostics)> {
    config.validate()?;
    let rho = config.rho;
    let mut z = initial_mean_path(model)?;
    let mut warm: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut inner_iterations = Vec::new();
    for outer in 0..config.max_outer {
        let sol = picard_solve_from(model, &z, &config.inner, noise, warm.as_deref()).map_err(|e| Error::Inner {
            outer,
            source: Box::new(e),
        })?;
        inner_iterations.push(sol.iterations());
        let mean = sample_mean_path(model, &sol.ensemble);
        let next: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(mean.as_slice())
            .map(|(a, b)| a + rho * (b - a))
            .collect();
        let next = MeanPath::new(model.n(), next)?;
        let change = next.max_abs_diff(&z);
        history.push(change);
        z = next;
        warm = Some(sol.ensemble.u);
        if change <= config.tol_z {
            let sol = picard_solve_from(model, &z, &config.inner, noise, warm.as_deref()).map_err(|e| Error::Inner {
                outer: outer + 1,
                source: Box::new(e),
            })?;
            inner_iterations.push(sol.iterations());
            let consistency_residual = z.max_abs_diff(&sample_mean_path(model, &sol.ensemble));
            let mean_stderr = node_stderr(&sol.ensemble);
            return Ok((
                z,
                sol,
                FixedPointDiagnostics {
                    history,
                    inner_iterations,
                    consistency_residual,
                    mean_stderr,
                },
            ));
        }
    }
    Err(Error::OuterNotConverged { history })
}

/// Integrates the mean equation `ṁ = A m + B E[u] + F m + b` with `E[u]`
/// the per-node sample mean of the solved controls and returns
/// `max_k |m_k − z*_k|`.
pub fn mean_ode_check(model: &Model, z: &MeanPath, sol: &FbsdeSolution) -> f64 {
    euler_mean_path(model, &sol.ensemble.mean_controls()).max_abs_diff(z)
}

#[cfg(test)]
mod tests;
