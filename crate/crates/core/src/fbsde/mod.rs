//! The frozen-mean Hamiltonian system
//!
//! ```text
//! dx = (A x + B u + F z + b)dt + (D u + σ)dW,        x(0) = x0,
//! dp = −(Aᵀp − Q(x − z))dt + q dW,                   p(T) = −G(x(T) − z(T)),
//! u  = P_Γ^R[R⁻¹(Bᵀp + Dᵀq)],
//! ```
//!
//! solved by Euler–Maruyama forward, an explicit regression scheme backward
//! and damped Picard iteration on the control, all on one noise bank.

pub mod noise;
pub mod regression;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{matvec_into, matvec_t_into, pairwise_sum};
use crate::mean_field::MeanPath;
use crate::model::{Model, MAX_DIM};
use crate::stats::mean_stderr;

pub use noise::NoiseBank;
pub use regression::{Design, MonomialBasis, NodeFit};

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    /// Damping `θ ∈ (0, 1]` of the control update.
    pub theta: f64,
    /// Stopping tolerance on `(Σ_k E|Δu_k|² dt)^{1/2}`.
    pub tol_u: f64,
    pub max_iter: usize,
    pub basis_degree: usize,
    /// Number of Monte Carlo paths `M`.
    pub paths: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            tol_u: 1e-5,
            max_iter: 200,
            basis_degree: 3,
            paths: 10_000,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidInput(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if !(self.tol_u > 0.0 && self.tol_u.is_finite()) {
            return Err(Error::InvalidInput(format!("tol_u must be positive, got {}", self.tol_u)));
        }
        if self.basis_degree == 0 {
            return Err(Error::InvalidInput("basis_degree must be at least 1".into()));
        }
        if self.max_iter == 0 || self.paths == 0 {
            return Err(Error::InvalidInput("max_iter and paths must be positive".into()));
        }
        Ok(())
    }
}

/// Node-major Monte Carlo ensemble: state `x[(k·M + j)·n + i]` for
/// `k = 0..=K`, control `u[(k·M + j)·m + i]` for `k = 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub paths: usize,
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl PathEnsemble {
    pub fn state(&self, k: usize, j: usize) -> &[f64] {
        let o = (k * self.paths + j) * self.n;
        &self.x[o..o + self.n]
    }

    pub fn control(&self, k: usize, j: usize) -> &[f64] {
        let o = (k * self.paths + j) * self.m;
        &self.u[o..o + self.m]
    }

    /// All states at node `k`, `paths × n`.
    pub fn node_states(&self, k: usize) -> &[f64] {
        &self.x[k * self.paths * self.n..(k + 1) * self.paths * self.n]
    }

    pub fn node_controls(&self, k: usize) -> &[f64] {
        &self.u[k * self.paths * self.m..(k + 1) * self.paths * self.m]
    }

    /// Sample mean of the state at every node (pairwise summation).
    pub fn mean_path(&self) -> MeanPath {
        let mut values = Vec::with_capacity((self.steps + 1) * self.n);
        for k in 0..=self.steps {
            values.extend(column_means(self.node_states(k), self.n));
        }
        MeanPath::new(self.n, values).expect("finite ensemble")
    }

    /// Sample mean of the control at nodes `0..K`, node-major.
    pub fn mean_controls(&self) -> Vec<f64> {
        (0..self.steps)
            .flat_map(|k| column_means(self.node_controls(k), self.m))
            .collect()
    }

    /// Per-path left-endpoint cost against `reference`.
    pub fn path_costs(&self, model: &Model, reference: &MeanPath) -> Vec<f64> {
        let (n, m, paths) = (self.n, self.m, self.paths);
        let dt = model.grid().dt();
        let mut costs = vec![0.0; paths];
        for k in 0..self.steps {
            let xs = self.node_states(k);
            let us = self.node_controls(k);
            let zk = reference.at(k);
            for j in 0..paths {
                costs[j] += model.running_cost(k, &xs[j * n..(j + 1) * n], zk, &us[j * m..(j + 1) * m]);
            }
        }
        let xs = self.node_states(self.steps);
        let zt = reference.at(self.steps);
        for j in 0..paths {
            costs[j] = costs[j] * dt + model.terminal_cost(&xs[j * n..(j + 1) * n], zt);
        }
        costs
    }

    /// Monte Carlo estimate of the limit cost and its standard error.
    pub fn limit_cost(&self, model: &Model, z: &MeanPath) -> (f64, f64) {
        mean_stderr(&self.path_costs(model, z))
    }
}

/// Column means of a `rows × width` row-major block.
pub fn column_means(block: &[f64], width: usize) -> Vec<f64> {
    let rows = block.len() / width;
    let mut col = vec![0.0; rows];
    (0..width)
        .map(|i| {
            for j in 0..rows {
                col[j] = block[j * width + i];
            }
            pairwise_sum(&col) / rows as f64
        })
        .collect()
}

/// One Euler–Maruyama step
/// `out = x + (A x + B u + F mean + b)dt + (D u + σ)dw` with node-`k`
/// coefficients. Every simulator in the crate goes through this function so
/// that identical inputs give identical floating-point results.
#[inline]
pub fn euler_step(model: &Model, k: usize, x: &[f64], u: &[f64], mean: &[f64], dw: f64, out: &mut [f64]) {
    let n = model.n();
    let c = model.coeffs();
    let dt = model.grid().dt();
    let mut drift = [0.0; MAX_DIM];
    let mut bu = [0.0; MAX_DIM];
    let mut fz = [0.0; MAX_DIM];
    let mut du = [0.0; MAX_DIM];
    matvec_into(&c.a[k], x, &mut drift[..n]);
    matvec_into(&c.b[k], u, &mut bu[..n]);
    matvec_into(&c.f[k], mean, &mut fz[..n]);
    matvec_into(&c.d[k], u, &mut du[..n]);
    for i in 0..n {
        let mu = drift[i] + bu[i] + fz[i] + c.drift[k][i];
        out[i] = x[i] + mu * dt + (du[i] + c.sigma[k][i]) * dw;
    }
}

/// Control source for [`simulate_forward`].
pub enum Policy<'a> {
    /// Node-major controls, one per path and step.
    Paths(&'a [f64]),
    /// `u = f(k, x)`.
    Feedback(&'a (dyn Fn(usize, &[f64], &mut [f64]) -> Result<()> + Sync)),
}

/// Euler–Maruyama simulation of the frozen-mean dynamics for every path of
/// `noise`.
pub fn simulate_forward(model: &Model, z: &MeanPath, policy: Policy<'_>, noise: &NoiseBank) -> Result<PathEnsemble> {
    let (n, m) = (model.n(), model.m());
    let steps = model.grid().steps();
    let paths = noise.paths();
    if !noise.matches_grid(model.grid()) || z.nodes() != steps + 1 || z.dim() != n {
        return Err(Error::ShapeMismatch("noise bank or mean path does not match the grid".into()));
    }
    if let Policy::Paths(u) = &policy {
        if u.len() != steps * paths * m {
            return Err(Error::ShapeMismatch(format!(
                "control paths have {} entries, expected {}",
                u.len(),
                steps * paths * m
            )));
        }
    }
    let mut x = vec![0.0; (steps + 1) * paths * n];
    let mut u = vec![0.0; steps * paths * m];
    for j in 0..paths {
        x[j * n..(j + 1) * n].copy_from_slice(model.x0());
    }
    for k in 0..steps {
        let (head, tail) = x.split_at_mut((k + 1) * paths * n);
        let xk = &head[k * paths * n..];
        let xnext = &mut tail[..paths * n];
        let uk = &mut u[k * paths * m..(k + 1) * paths * m];
        let dw = noise.node(k);
        let zk = z.at(k);
        let failure = xnext
            .par_chunks_mut(n * CHUNK)
            .zip(uk.par_chunks_mut(m * CHUNK))
            .enumerate()
            .map(|(c, (xblock, ublock))| -> Result<Option<usize>> {
                for (r, (xo, uo)) in xblock.chunks_mut(n).zip(ublock.chunks_mut(m)).enumerate() {
                    let j = c * CHUNK + r;
                    let xj = &xk[j * n..(j + 1) * n];
                    match &policy {
                        Policy::Paths(src) => {
                            let o = (k * paths + j) * m;
                            uo.copy_from_slice(&src[o..o + m]);
                        }
                        Policy::Feedback(f) => f(k, xj, uo)?,
                    }
                    euler_step(model, k, xj, uo, zk, dw[j], xo);
                    if xo.iter().any(|v| !v.is_finite()) {
                        return Ok(Some(j));
                    }
                }
                Ok(None)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .next();
        if let Some(path) = failure {
            return Err(Error::NonFiniteState { step: k + 1, path });
        }
    }
    Ok(PathEnsemble { paths, n, m, steps, x, u })
}

/// Adjoint paths and per-node regression fits.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    /// `p[(k·M + j)·n + i]`, `k = 0..=K`.
    pub p: Vec<f64>,
    /// `q[(k·M + j)·n + i]`, `k = 0..K`.
    pub q: Vec<f64>,
    /// Regression fits for nodes `0..K`.
    pub fits: Vec<NodeFit>,
}

impl BackwardSolution {
    pub fn adjoint(&self, paths: usize, n: usize, k: usize, j: usize) -> (&[f64], &[f64]) {
        let o = (k * paths + j) * n;
        (&self.p[o..o + n], &self.q[o..o + n])
    }
}

/// Explicit regression scheme for the adjoint:
///
/// ```text
/// p_K = −G(x_K − z_K),
/// p̄_k = E[p_{k+1} | x_k],
/// q_k = E[(p_{k+1} − p̄_k) ΔW_k | x_k] / dt,
/// p_k = p̄_k + dt (Aᵀp̄_k − Q(x_k − z_k)).
/// ```
///
/// Subtracting `p̄_k` before multiplying by `ΔW_k` leaves the conditional
/// expectation unchanged (`E[p̄_k ΔW_k | x_k] = 0`) and removes most of the
/// variance of the `q` estimator.
pub fn backward_pass(
    model: &Model,
    z: &MeanPath,
    ensemble: &PathEnsemble,
    noise: &NoiseBank,
    basis: &MonomialBasis,
) -> Result<BackwardSolution> {
    let n = model.n();
    let steps = ensemble.steps;
    let paths = ensemble.paths;
    let dt = model.grid().dt();
    let c = model.coeffs();
    if basis.dim() != n || noise.paths() != paths || ensemble.n != n {
        return Err(Error::ShapeMismatch("basis, noise and ensemble disagree".into()));
    }
    let mut p = vec![0.0; (steps + 1) * paths * n];
    let mut q = vec![0.0; steps * paths * n];
    let mut fits = Vec::with_capacity(steps);

    let zt = z.at(steps);
    {
        let xs = ensemble.node_states(steps);
        let pt = &mut p[steps * paths * n..];
        let mut dev = [0.0; MAX_DIM];
        for j in 0..paths {
            for i in 0..n {
                dev[i] = xs[j * n + i] - zt[i];
            }
            matvec_into(&c.g, &dev[..n], &mut pt[j * n..(j + 1) * n]);
            for v in &mut pt[j * n..(j + 1) * n] {
                *v = -*v;
            }
        }
    }

    for k in (0..steps).rev() {
        let xs = ensemble.node_states(k);
        let design = Design::new(basis, xs, k)?;
        let (head, tail) = p.split_at_mut((k + 1) * paths * n);
        let p_next = &tail[..paths * n];
        let p_coef = design.solve(p_next, n, k)?;
        let fitted = design.predict_all(&p_coef, n);
        let dw = noise.node(k);
        let target: Vec<f64> = (0..paths * n)
            .map(|idx| (p_next[idx] - fitted[idx]) * dw[idx / n])
            .collect();
        let mut q_coef = design.solve(&target, n, k)?;
        for v in q_coef.iter_mut() {
            *v /= dt;
        }
        let qk = design.predict_all(&q_coef, n);
        q[k * paths * n..(k + 1) * paths * n].copy_from_slice(&qk);

        let resid: Vec<f64> = p_next.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).collect();
        let residual = pairwise_sum(&resid) / paths as f64;

        let pk = &mut head[k * paths * n..];
        let zk = z.at(k);
        pk.par_chunks_mut(n * CHUNK).enumerate().for_each(|(cidx, block)| {
            let mut at = [0.0; MAX_DIM];
            let mut qx = [0.0; MAX_DIM];
            let mut dev = [0.0; MAX_DIM];
            for (r, out) in block.chunks_mut(n).enumerate() {
                let j = cidx * CHUNK + r;
                let mean = &fitted[j * n..(j + 1) * n];
                matvec_t_into(&c.a[k], mean, &mut at[..n]);
                for i in 0..n {
                    dev[i] = xs[j * n + i] - zk[i];
                }
                matvec_into(&c.q[k], &dev[..n], &mut qx[..n]);
                for i in 0..n {
                    out[i] = mean[i] + dt * (at[i] - qx[i]);
                }
            }
        });
        fits.push(NodeFit {
            center: design.center().to_vec(),
            scale: design.scale().to_vec(),
            p_coef,
            q_coef,
            residual,
        });
    }
    fits.reverse();
    Ok(BackwardSolution { p, q, fits })
}

/// A converged frozen-mean solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution {
    pub z: MeanPath,
    pub ensemble: PathEnsemble,
    pub backward: BackwardSolution,
    pub basis: MonomialBasis,
    /// Control change `(Σ_k E|Δu|² dt)^{1/2}` after each Picard iteration.
    pub log: Vec<f64>,
    /// Always `true` on success; iteration that hits `max_iter` returns
    /// [`Error::NotConverged`] instead.
    pub converged: bool,
    noise: (u64, usize, usize, u64),
}

impl FbsdeSolution {
    pub fn iterations(&self) -> usize {
        self.log.len()
    }

    pub fn noise_fingerprint(&self) -> (u64, usize, usize, u64) {
        self.noise
    }

    /// Regression estimates `p̂_k(x)`, `q̂_k(x)` at an arbitrary state. At
    /// `k = K` the terminal condition is exact and `q` is zero.
    pub fn adjoint_at(&self, model: &Model, k: usize, x: &[f64], p: &mut [f64], q: &mut [f64]) {
        let n = model.n();
        let c = model.coeffs();
        let zk = self.z.at(k);
        let mut dev = [0.0; MAX_DIM];
        for i in 0..n {
            dev[i] = x[i] - zk[i];
        }
        if k == self.ensemble.steps {
            matvec_into(&c.g, &dev[..n], p);
            p.iter_mut().for_each(|v| *v = -*v);
            q.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let dt = model.grid().dt();
        let mut mean = [0.0; MAX_DIM];
        self.backward.fits[k].predict(&self.basis, x, &mut mean[..n], q);
        let mut at = [0.0; MAX_DIM];
        let mut qx = [0.0; MAX_DIM];
        matvec_t_into(&c.a[k], &mean[..n], &mut at[..n]);
        matvec_into(&c.q[k], &dev[..n], &mut qx[..n]);
        for i in 0..n {
            p[i] = mean[i] + dt * (at[i] - qx[i]);
        }
    }

    /// The solved feedback `u = φ(t_k, p̂_k(x), q̂_k(x))`.
    pub fn feedback_control(&self, model: &Model, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = model.n();
        let mut p = [0.0; MAX_DIM];
        let mut q = [0.0; MAX_DIM];
        self.adjoint_at(model, k, x, &mut p[..n], &mut q[..n]);
        model.control_map_into(k, &p[..n], &q[..n], out)
    }

    /// Cost of the solved feedback on an independent noise bank, with its
    /// standard error.
    pub fn feedback_cost(&self, model: &Model, noise: &NoiseBank) -> Result<(f64, f64)> {
        let policy = |k: usize, x: &[f64], out: &mut [f64]| self.feedback_control(model, k, x, out);
        let ens = simulate_forward(model, &self.z, Policy::Feedback(&policy), noise)?;
        Ok(ens.limit_cost(model, &self.z))
    }
}

/// Pathwise control map `φ(t_k, p_k, q_k)` for every node `k < K`.
fn control_candidates(model: &Model, backward: &BackwardSolution, paths: usize, steps: usize) -> Result<Vec<f64>> {
    let (n, m) = (model.n(), model.m());
    let mut cand = vec![0.0; steps * paths * m];
    cand.par_chunks_mut(m * CHUNK)
        .enumerate()
        .map(|(c, block)| -> Result<()> {
            for (r, out) in block.chunks_mut(m).enumerate() {
                let idx = c * CHUNK + r;
                let k = idx / paths;
                let o = idx * n;
                model.control_map_into(k, &backward.p[o..o + n], &backward.q[o..o + n], out)?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(cand)
}

/// The initial guess `P_Γ^R[0]` on every path.
pub fn zero_control_paths(model: &Model, paths: usize) -> Result<Vec<f64>> {
    let m = model.m();
    let steps = model.grid().steps();
    let mut u = Vec::with_capacity(steps * paths * m);
    for k in 0..steps {
        let u0 = model.zero_control(k)?;
        for _ in 0..paths {
            u.extend_from_slice(&u0);
        }
    }
    Ok(u)
}

/// Damped Picard iteration from `u⁽⁰⁾ = P_Γ^R[0]`.
pub fn picard_solve_frozen(model: &Model, z: &MeanPath, config: &PicardConfig, noise: &NoiseBank) -> Result<FbsdeSolution> {
    picard_solve_from(model, z, config, noise, None)
}

/// Damped Picard iteration from a given node-major initial control (or
/// `P_Γ^R[0]` when `None`). Every iteration reuses `noise`:
///
/// 1. simulate the state under `u⁽ʲ⁾`;
/// 2. run the backward regression;
/// 3. `u⁽ʲ⁺¹⁾ = P_Γ[u⁽ʲ⁾ + θ(φ(p, q) − u⁽ʲ⁾)]`.
///
/// It stops once `(Σ_k E|u⁽ʲ⁺¹⁾ − u⁽ʲ⁾|² dt)^{1/2} ≤ tol_u`, then runs one
/// more forward and backward pass so the returned adjoints belong to the
/// returned controls.
pub fn picard_solve_from(
    model: &Model,
    z: &MeanPath,
    config: &PicardConfig,
    noise: &NoiseBank,
    init: Option<&[f64]>,
) -> Result<FbsdeSolution> {
    config.validate()?;
    if noise.paths() != config.paths {
        return Err(Error::InvalidInput(format!(
            "noise bank has {} paths, configuration asks for {}",
            noise.paths(),
            config.paths
        )));
    }
    let m = model.m();
    let steps = model.grid().steps();
    let paths = noise.paths();
    let dt = model.grid().dt();
    let basis = MonomialBasis::new(model.n(), config.basis_degree)?;
    let mut u = match init {
        Some(u) => {
            if u.len() != steps * paths * m {
                return Err(Error::ShapeMismatch("initial control has the wrong length".into()));
            }
            let mut u = u.to_vec();
            for chunk in u.chunks_mut(m) {
                let projected = model.gamma().project(chunk);
                chunk.copy_from_slice(&projected);
            }
            u
        }
        None => zero_control_paths(model, paths)?,
    };
    let theta = config.theta;
    let mut log = Vec::new();
    loop {
        let ensemble = simulate_forward(model, z, Policy::Paths(&u), noise)?;
        let backward = backward_pass(model, z, &ensemble, noise, &basis)?;
        if log.last().is_some_and(|&c| c <= config.tol_u) {
            return Ok(FbsdeSolution {
                z: z.clone(),
                ensemble,
                backward,
                basis,
                log,
                converged: true,
                noise: noise.fingerprint(),
            });
        }
        if log.len() >= config.max_iter {
            return Err(Error::NotConverged { log });
        }
        let cand = control_candidates(model, &backward, paths, steps)?;
        let gamma = model.gamma();
        let partial: Vec<f64> = u
            .par_chunks_mut(m * CHUNK)
            .zip(cand.par_chunks(m * CHUNK))
            .map(|(ublock, cblock)| {
                let mut acc = 0.0;
                let mut next = [0.0; MAX_DIM];
                let mut proj = [0.0; MAX_DIM];
                for (uo, co) in ublock.chunks_mut(m).zip(cblock.chunks(m)) {
                    for i in 0..m {
                        next[i] = uo[i] + theta * (co[i] - uo[i]);
                    }
                    gamma.project_into(&next[..m], &mut proj[..m]);
                    for i in 0..m {
                        acc += (proj[i] - uo[i]) * (proj[i] - uo[i]);
                        uo[i] = proj[i];
                    }
                }
                acc
            })
            .collect();
        let change = (pairwise_sum(&partial) / paths as f64 * dt).sqrt();
        log.push(change);
    }
}

/// `E∫⟨φ_A − φ_B, Bᵀ(p_A − p_B) + Dᵀ(q_A − q_B)⟩dt` for two solutions on the
/// same noise bank, with `φ = φ(t, p, q)` the control map. Monotonicity of
/// the weighted projection makes every integrand nonnegative.
pub fn monotonicity_diagnostic(model: &Model, a: &FbsdeSolution, b: &FbsdeSolution) -> Result<f64> {
    if a.noise != b.noise || a.ensemble.steps != b.ensemble.steps {
        return Err(Error::MismatchedNoise);
    }
    let (n, m) = (model.n(), model.m());
    let paths = a.ensemble.paths;
    let steps = a.ensemble.steps;
    let dt = model.grid().dt();
    let c = model.coeffs();
    let mut per_node = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut vals = vec![0.0; paths];
        for (j, v) in vals.iter_mut().enumerate() {
            let (pa, qa) = a.backward.adjoint(paths, n, k, j);
            let (pb, qb) = b.backward.adjoint(paths, n, k, j);
            let mut phi_a = [0.0; MAX_DIM];
            let mut phi_b = [0.0; MAX_DIM];
            model.control_map_into(k, pa, qa, &mut phi_a[..m])?;
            model.control_map_into(k, pb, qb, &mut phi_b[..m])?;
            let mut dp = [0.0; MAX_DIM];
            let mut dq = [0.0; MAX_DIM];
            for i in 0..n {
                dp[i] = pa[i] - pb[i];
                dq[i] = qa[i] - qb[i];
            }
            let mut bt = [0.0; MAX_DIM];
            let mut dt_q = [0.0; MAX_DIM];
            matvec_t_into(&c.b[k], &dp[..n], &mut bt[..m]);
            matvec_t_into(&c.d[k], &dq[..n], &mut dt_q[..m]);
            *v = (0..m).map(|i| (phi_a[i] - phi_b[i]) * (bt[i] + dt_q[i])).sum();
        }
        per_node.push(pairwise_sum(&vals) / paths as f64);
    }
    Ok(pairwise_sum(&per_node) * dt)
}

#[cfg(test)]
mod tests;
