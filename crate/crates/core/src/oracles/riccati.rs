//! Reference solution of the unconstrained problem through the Riccati
//! system.
//!
//! With `Γ = ℝ^m` the optimal adjoint is affine in the state. Substituting
//! `p = −(P x + s)` into the adjoint equation `dp = −(Aᵀp − Q(x − z))dt + q dW`
//! and matching the `dW` terms gives `q = −P(D u + σ)`. The first-order
//! condition `R u = Bᵀp + Dᵀq` then reads
//!
//! ```text
//! (R + DᵀPD) u = −(BᵀP x + Bᵀs + DᵀPσ)   ⇒   u = −K x − k,
//! K = (R + DᵀPD)⁻¹BᵀP,   k = (R + DᵀPD)⁻¹(Bᵀs + DᵀPσ).
//! ```
//!
//! Matching the `x`-linear and constant drift terms yields
//!
//! ```text
//! −Ṗ = AᵀP + PA − PB(R + DᵀPD)⁻¹BᵀP + Q,            P(T) = G,
//!  ṡ = PBk − PFz − Pb − Aᵀs + Qz,                     s(T) = −G z(T),
//!  ṙ = −sᵀ(Fz + b) + ½kᵀ(R + DᵀPD)k − ½σᵀPσ − ½zᵀQz,  r(T) = ½z(T)ᵀG z(T),
//! ```
//!
//! and the optimal cost from `(t, x)` is `½xᵀP x + sᵀx + r`. The `x`-linear
//! terms in `K` cancel because `(R + DᵀPD)k = Bᵀs + DᵀPσ`.
//!
//! [`solve_discrete_riccati`] is the exact counterpart for the Euler-discretised
//! problem, useful when comparing against grid-based solvers.

use nalgebra::{DMatrix, DVector};

use crate::convex_sets::ConvexSet;
use crate::error::{Error, Result};
use crate::linalg::eigen_bounds;
use crate::mean_field::MeanPath;
use crate::model::Model;

/// RK4 substeps per grid interval.
pub const RK_SUBSTEPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `P_k`, symmetric `n × n`.
    pub p: Vec<DMatrix<f64>>,
    /// `s_k`, length `n`.
    pub s: Vec<DVector<f64>>,
    /// Constant term `r_k` of the value function.
    pub r: Vec<f64>,
    /// Feedback gain `K_k`, `m × n`.
    pub gain: Vec<DMatrix<f64>>,
    /// Feedforward `k_k`, length `m`.
    pub offset: Vec<DVector<f64>>,
}

impl RiccatiSolution {
    /// `u = −K_k x − k_k`.
    pub fn control(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let u = -(&self.gain[k] * DVector::from_row_slice(x)) - &self.offset[k];
        u.as_slice().to_vec()
    }

    /// `p = −(P_k x + s_k)`.
    pub fn adjoint(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let p = -(&self.p[k] * DVector::from_row_slice(x)) - &self.s[k];
        p.as_slice().to_vec()
    }

    /// `q = −P_k(D u + σ)` evaluated with the model's node-`k` coefficients.
    pub fn adjoint_diffusion(&self, model: &Model, k: usize, u: &[f64]) -> Vec<f64> {
        let c = model.coeffs();
        let q = -(&self.p[k] * (&c.d[k] * DVector::from_row_slice(u) + &c.sigma[k]));
        q.as_slice().to_vec()
    }

    /// `½xᵀP_k x + s_kᵀx + r_k`.
    pub fn value(&self, k: usize, x: &[f64]) -> f64 {
        let xv = DVector::from_row_slice(x);
        0.5 * xv.dot(&(&self.p[k] * &xv)) + self.s[k].dot(&xv) + self.r[k]
    }
}

struct NodeCoeffs<'a> {
    a: &'a DMatrix<f64>,
    f: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    d: &'a DMatrix<f64>,
    drift: &'a DVector<f64>,
    sigma: &'a DVector<f64>,
    q: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
}

impl<'a> NodeCoeffs<'a> {
    fn at(model: &'a Model, k: usize) -> Self {
        let c = model.coeffs();
        Self {
            a: &c.a[k],
            f: &c.f[k],
            b: &c.b[k],
            d: &c.d[k],
            drift: &c.drift[k],
            sigma: &c.sigma[k],
            q: &c.q[k],
            r: &c.r[k],
        }
    }
}

fn inner_matrix_inverse(inner: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    match inner.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => {
            let sym = (inner + inner.transpose()) * 0.5;
            let (lo, _) = eigen_bounds(&sym);
            Err(Error::SingularInnerMatrix { node, min_eigenvalue: lo })
        }
    }
}

/// Gain and feedforward for given `P`, `s` at node coefficients `c`.
fn feedback(c: &NodeCoeffs, p: &DMatrix<f64>, s: &DVector<f64>, node: usize) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let inner = c.r + c.d.transpose() * p * c.d;
    let inv = inner_matrix_inverse(&inner, node)?;
    let gain = &inv * c.b.transpose() * p;
    let offset = &inv * (c.b.transpose() * s + c.d.transpose() * p * c.sigma);
    Ok((gain, offset, inner))
}

type Derivative = (DMatrix<f64>, DVector<f64>, f64);

fn derivative(c: &NodeCoeffs, z: &DVector<f64>, p: &DMatrix<f64>, s: &DVector<f64>, node: usize) -> Result<Derivative> {
    let (gain, offset, inner) = feedback(c, p, s, node)?;
    let pb = p * c.b;
    let dp = -(c.a.transpose() * p + p * c.a - &pb * &gain + c.q);
    let ds = &pb * &offset - p * (c.f * z) - p * c.drift - c.a.transpose() * s + c.q * z;
    let dr = -s.dot(&(c.f * z + c.drift)) + 0.5 * offset.dot(&(&inner * &offset))
        - 0.5 * c.sigma.dot(&(p * c.sigma))
        - 0.5 * z.dot(&(c.q * z));
    Ok((dp, ds, dr))
}

fn check_unconstrained(model: &Model, z: &MeanPath) -> Result<()> {
    if !matches!(model.gamma(), ConvexSet::FullSpace { .. }) {
        return Err(Error::InvalidInput(format!(
            "the Riccati oracle needs an unconstrained control set, got {}",
            model.gamma().kind()
        )));
    }
    if z.dim() != model.n() || z.nodes() != model.grid().nodes() {
        return Err(Error::ShapeMismatch(format!(
            "mean path has {} nodes of dimension {}, grid has {} nodes of dimension {}",
            z.nodes(),
            z.dim(),
            model.grid().nodes(),
            model.n()
        )));
    }
    Ok(())
}

/// Integrates the Riccati system backward with classical RK4, substepped
/// [`RK_SUBSTEPS`] times per grid interval. Coefficients on `[t_k, t_{k+1})`
/// are the node-`k` values; `z` is interpolated linearly between nodes.
pub fn solve_riccati(model: &Model, z: &MeanPath) -> Result<RiccatiSolution> {
    check_unconstrained(model, z)?;
    let steps = model.grid().steps();
    let h = model.grid().dt() / RK_SUBSTEPS as f64;
    let zv = |k: usize| DVector::from_row_slice(z.at(k));

    let g = model.coeffs().g.clone();
    let mut p_nodes = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut s_nodes = vec![DVector::zeros(0); steps + 1];
    let mut r_nodes = vec![0.0; steps + 1];
    let z_t = zv(steps);
    let s_t = -(&g * &z_t);
    r_nodes[steps] = 0.5 * z_t.dot(&(&g * &z_t));
    p_nodes[steps] = g;
    s_nodes[steps] = s_t;

    for k in (0..steps).rev() {
        let c = NodeCoeffs::at(model, k);
        let (z_lo, z_hi) = (zv(k), zv(k + 1));
        let z_at = |frac: f64| &z_lo * (1.0 - frac) + &z_hi * frac;
        let mut p = p_nodes[k + 1].clone();
        let mut s = s_nodes[k + 1].clone();
        let mut r = r_nodes[k + 1];
        for sub in (0..RK_SUBSTEPS).rev() {
            // Step from fraction (sub + 1)/S down to sub/S of the interval.
            let f1 = (sub + 1) as f64 / RK_SUBSTEPS as f64;
            let fm = (sub as f64 + 0.5) / RK_SUBSTEPS as f64;
            let f0 = sub as f64 / RK_SUBSTEPS as f64;
            let (z1, zm, z0) = (z_at(f1), z_at(fm), z_at(f0));
            let (k1p, k1s, k1r) = derivative(&c, &z1, &p, &s, k)?;
            let (k2p, k2s, k2r) = derivative(&c, &zm, &(&p - &k1p * (0.5 * h)), &(&s - &k1s * (0.5 * h)), k)?;
            let (k3p, k3s, k3r) = derivative(&c, &zm, &(&p - &k2p * (0.5 * h)), &(&s - &k2s * (0.5 * h)), k)?;
            let (k4p, k4s, k4r) = derivative(&c, &z0, &(&p - &k3p * h), &(&s - &k3s * h), k)?;
            p -= (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            s -= (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (h / 6.0);
            r -= (k1r + 2.0 * k2r + 2.0 * k3r + k4r) * (h / 6.0);
            p = (&p + p.transpose()) * 0.5;
        }
        p_nodes[k] = p;
        s_nodes[k] = s;
        r_nodes[k] = r;
    }

    let mut gain = Vec::with_capacity(steps + 1);
    let mut offset = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let c = NodeCoeffs::at(model, k);
        let (gk, ok, _) = feedback(&c, &p_nodes[k], &s_nodes[k], k)?;
        gain.push(gk);
        offset.push(ok);
    }
    Ok(RiccatiSolution {
        p: p_nodes,
        s: s_nodes,
        r: r_nodes,
        gain,
        offset,
    })
}

/// Exact dynamic-programming solution of the Euler-discretised unconstrained
/// problem `x_{k+1} = x_k + (A x_k + B u_k + F z_k + b)dt + (D u_k + σ)ΔW_k`
/// with left-endpoint running cost. The value at node `k` is again
/// `½xᵀP_k x + s_kᵀx + r_k` and the optimal control `−K_k x − k_k`;
/// `gain` and `offset` at node `K` repeat node `K − 1`.
pub fn solve_discrete_riccati(model: &Model, z: &MeanPath) -> Result<RiccatiSolution> {
    check_unconstrained(model, z)?;
    let n = model.n();
    let steps = model.grid().steps();
    let dt = model.grid().dt();
    let sq = dt.sqrt();
    let zv = |k: usize| DVector::from_row_slice(z.at(k));

    let g = model.coeffs().g.clone();
    let mut p_nodes = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut s_nodes = vec![DVector::zeros(0); steps + 1];
    let mut r_nodes = vec![0.0; steps + 1];
    let mut gain = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut offset = vec![DVector::zeros(0); steps + 1];
    let z_t = zv(steps);
    s_nodes[steps] = -(&g * &z_t);
    r_nodes[steps] = 0.5 * z_t.dot(&(&g * &z_t));
    p_nodes[steps] = g;

    for k in (0..steps).rev() {
        let c = NodeCoeffs::at(model, k);
        let zk = zv(k);
        let p = &p_nodes[k + 1];
        let s = &s_nodes[k + 1];
        let phi = DMatrix::identity(n, n) + c.a * dt;
        let shift = (c.f * &zk + c.drift) * dt;
        let bd = c.b * dt;
        let dd = c.d * sq;
        let sd = c.sigma * sq;
        let inner = c.r * dt + bd.transpose() * p * &bd + dd.transpose() * p * &dd;
        let inv = inner_matrix_inverse(&inner, k)?;
        let h_ux = bd.transpose() * p * &phi;
        let g_u = bd.transpose() * p * &shift + dd.transpose() * p * &sd + bd.transpose() * s;
        let g_x = -(c.q * &zk) * dt + phi.transpose() * p * &shift + phi.transpose() * s;
        let gk = &inv * &h_ux;
        let ok = &inv * &g_u;
        let pk = c.q * dt + phi.transpose() * p * &phi - gk.transpose() * &inner * &gk;
        let sk = g_x - gk.transpose() * &inner * &ok;
        let rk = 0.5 * zk.dot(&(c.q * &zk)) * dt
            + 0.5 * shift.dot(&(p * &shift))
            + 0.5 * sd.dot(&(p * &sd))
            + s.dot(&shift)
            + r_nodes[k + 1]
            - 0.5 * ok.dot(&(&inner * &ok));
        p_nodes[k] = (&pk + pk.transpose()) * 0.5;
        s_nodes[k] = sk;
        r_nodes[k] = rk;
        gain[k] = gk;
        offset[k] = ok;
    }
    gain[steps] = gain[steps - 1].clone();
    offset[steps] = offset[steps - 1].clone();
    Ok(RiccatiSolution {
        p: p_nodes,
        s: s_nodes,
        r: r_nodes,
        gain,
        offset,
    })
}

/// Euler recursion for `E x` under the affine feedback of `sol` with the
/// mean-field drift evaluated at `z`:
/// `m_{k+1} = m_k + ((A − BK_k)m_k − Bk_k + F z_k + b)dt`.
pub fn feedback_mean_path(model: &Model, sol: &RiccatiSolution, z: &MeanPath) -> MeanPath {
    let steps = model.grid().steps();
    let dt = model.grid().dt();
    let c = model.coeffs();
    let mut mean = DVector::from_row_slice(model.x0());
    let mut values = Vec::with_capacity((steps + 1) * model.n());
    values.extend_from_slice(mean.as_slice());
    for k in 0..steps {
        let zk = DVector::from_row_slice(z.at(k));
        let drift = (&c.a[k] - &c.b[k] * &sol.gain[k]) * &mean - &c.b[k] * &sol.offset[k] + &c.f[k] * zk + &c.drift[k];
        mean += drift * dt;
        values.extend_from_slice(mean.as_slice());
    }
    MeanPath::new(model.n(), values).expect("finite mean path")
}

/// Mean-field fixed point of the unconstrained problem: iterate
/// `z ← (1 − ρ)z + ρ·feedback_mean_path(solve(z))` with `ρ = ½` until the
/// update is below `tol`. `discrete` selects [`solve_discrete_riccati`].
pub fn riccati_fixed_point(model: &Model, tol: f64, max_iter: usize, discrete: bool) -> Result<(MeanPath, RiccatiSolution)> {
    let nodes = model.grid().nodes();
    let mut z = MeanPath::constant(model.x0(), nodes);
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let sol = if discrete {
            solve_discrete_riccati(model, &z)?
        } else {
            solve_riccati(model, &z)?
        };
        let target = feedback_mean_path(model, &sol, &z);
        let next: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        let next = MeanPath::new(model.n(), next)?;
        let change = next.max_abs_diff(&z);
        history.push(change);
        z = next;
        if change <= tol {
            let sol = if discrete {
                solve_discrete_riccati(model, &z)?
            } else {
                solve_riccati(model, &z)?
            };
            return Ok((z, sol));
        }
    }
    Err(Error::OuterNotConverged { history })
}
