//! Problem instances: time grid, coefficient paths, assumption checks, the
//! projected control map, the Hamiltonian and the quadratic cost functionals.
//!
//! Coefficients are piecewise constant in time: the values stored at node `k`
//! act on `[t_k, t_{k+1})`. Assumption labels follow the usual standing
//! hypotheses of the linear-quadratic setting:
//!
//! * `H1`: bounded coefficients, and in strict mode symmetric `A` and `F`;
//! * `H2`: `Q ⪰ 0`, `G ⪰ 0`, and `R ≻ 0` with a uniform lower bound `r_min`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::convex_sets::{ConvexSet, WeightMatrix};
use crate::error::{Error, Result};
use crate::linalg::{eigen_bounds, is_symmetric, matvec_into, matvec_t_into, quad_form};

/// Largest supported state or control dimension; hot loops keep their
/// scratch vectors on the stack.
pub const MAX_DIM: usize = 16;

/// Default positive-definiteness floor for `R`.
pub const DEFAULT_R_MIN: f64 = 1e-8;

/// Feasibility tolerance applied to controls handed back to the model.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 time steps, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `K`; there are `K + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Coefficient paths, one entry per grid node.
///
/// Dynamics `dx = (A x + B u + F z + drift) dt + (D u + sigma) dW` with
/// running cost `½(⟨Q(x − z), x − z⟩ + ⟨R u, u⟩)` and terminal cost
/// `½⟨G(x_T − z_T), x_T − z_T⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub drift: Vec<DVector<f64>>,
    pub sigma: Vec<DVector<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub g: DMatrix<f64>,
}

/// Time-invariant coefficients, broadcast to every node by [`Self::broadcast`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCoefficients {
    pub a: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub sigma: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl ConstantCoefficients {
    pub fn broadcast(&self, nodes: usize) -> Coefficients {
        Coefficients {
            a: vec![self.a.clone(); nodes],
            f: vec![self.f.clone(); nodes],
            b: vec![self.b.clone(); nodes],
            d: vec![self.d.clone(); nodes],
            drift: vec![self.drift.clone(); nodes],
            sigma: vec![self.sigma.clone(); nodes],
            q: vec![self.q.clone(); nodes],
            r: vec![self.r.clone(); nodes],
            g: self.g.clone(),
        }
    }
}

/// Raw problem data. [`ModelSpec::new`] checks shapes only; the standing
/// assumptions are checked by [`ModelSpec::validate`] and enforced by
/// [`Model::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n: usize,
    pub m: usize,
    pub x0: DVector<f64>,
    pub grid: TimeGrid,
    pub coeffs: Coefficients,
    pub gamma: ConvexSet,
    pub r_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assumption {
    H1,
    H2,
    /// Initial state and constraint set.
    Data,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assumption::H1 => write!(f, "H1"),
            Assumption::H2 => write!(f, "H2"),
            Assumption::Data => write!(f, "data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub assumption: Assumption,
    pub node: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(k) => write!(f, "({}) node {k}: {}", self.assumption, self.message),
            None => write!(f, "({}) {}", self.assumption, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, assumption: Assumption, node: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            assumption,
            node,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_shape(name: &str, k: usize, mat: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if mat.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "{name} at node {k} is {}x{}, expected {rows}x{cols}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    Ok(())
}

impl ModelSpec {
    pub fn new(x0: DVector<f64>, grid: TimeGrid, coeffs: Coefficients, gamma: ConvexSet) -> Result<Self> {
        let n = x0.len();
        let m = coeffs.b.first().map(|b| b.ncols()).unwrap_or(0);
        let spec = Self {
            n,
            m,
            x0,
            grid,
            coeffs,
            gamma,
            r_min: DEFAULT_R_MIN,
        };
        spec.check_shapes()?;
        Ok(spec)
    }

    pub fn with_r_min(mut self, r_min: f64) -> Self {
        self.r_min = r_min;
        self
    }

    fn check_shapes(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 || n > MAX_DIM || m > MAX_DIM {
            return Err(Error::ShapeMismatch(format!(
                "dimensions n = {n}, m = {m} must lie in 1..={MAX_DIM}"
            )));
        }
        let nodes = self.grid.nodes();
        let c = &self.coeffs;
        let lens = [
            ("A", c.a.len()),
            ("F", c.f.len()),
            ("B", c.b.len()),
            ("D", c.d.len()),
            ("b", c.drift.len()),
            ("sigma", c.sigma.len()),
            ("Q", c.q.len()),
            ("R", c.r.len()),
        ];
        for (name, len) in lens {
            if len != nodes {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {len} nodes, expected {nodes}"
                )));
            }
        }
        for k in 0..nodes {
            check_shape("A", k, &c.a[k], n, n)?;
            check_shape("F", k, &c.f[k], n, n)?;
            check_shape("B", k, &c.b[k], n, m)?;
            check_shape("D", k, &c.d[k], n, m)?;
            check_shape("Q", k, &c.q[k], n, n)?;
            check_shape("R", k, &c.r[k], m, m)?;
            if c.drift[k].len() != n || c.sigma[k].len() != n {
                return Err(Error::ShapeMismatch(format!("b or sigma at node {k} is not length {n}")));
            }
        }
        check_shape("G", nodes - 1, &c.g, n, n)?;
        if self.gamma.dim() != m {
            return Err(Error::ShapeMismatch(format!(
                "constraint set has dimension {}, control dimension is {m}",
                self.gamma.dim()
            )));
        }
        Ok(())
    }

    /// Checks the standing assumptions. `strict_h1` adds the symmetry
    /// requirement on `A` and `F`.
    pub fn validate(&self, strict_h1: bool) -> ValidationReport {
        let mut report = ValidationReport::default();
        let c = &self.coeffs;
        if self.x0.iter().any(|v| !v.is_finite()) {
            report.push(Assumption::Data, None, "initial state is not finite");
        }
        if let Err(e) = self.gamma.validate() {
            report.push(Assumption::Data, None, format!("constraint set: {e}"));
        }
        if !(self.r_min.is_finite() && self.r_min > 0.0) {
            report.push(Assumption::H2, None, format!("r_min must be positive, got {}", self.r_min));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        for k in 0..self.grid.nodes() {
            let mats = [("A", &c.a[k]), ("F", &c.f[k]), ("B", &c.b[k]), ("D", &c.d[k]), ("Q", &c.q[k]), ("R", &c.r[k])];
            for (name, mat) in mats {
                if !finite(mat) {
                    report.push(Assumption::H1, Some(k), format!("{name} has non-finite entries"));
                }
            }
            if c.drift[k].iter().chain(c.sigma[k].iter()).any(|v| !v.is_finite()) {
                report.push(Assumption::H1, Some(k), "b or sigma has non-finite entries");
            }
            if strict_h1 {
                for (name, mat) in [("A", &c.a[k]), ("F", &c.f[k])] {
                    if finite(mat) && !is_symmetric(mat, 1e-12) {
                        report.push(Assumption::H1, Some(k), format!("{name} is not symmetric"));
                    }
                }
            }
            if finite(&c.q[k]) {
                if !is_symmetric(&c.q[k], 1e-12) {
                    report.push(Assumption::H2, Some(k), "Q is not symmetric");
                } else {
                    let (lo, _) = eigen_bounds(&c.q[k]);
                    if lo < -1e-10 {
                        report.push(Assumption::H2, Some(k), format!("Q is not positive semidefinite (min eigenvalue {lo:.3e})"));
                    }
                }
            }
            if finite(&c.r[k]) {
                if !is_symmetric(&c.r[k], 1e-12) {
                    report.push(Assumption::H2, Some(k), "R is not symmetric");
                } else {
                    let (lo, _) = eigen_bounds(&c.r[k]);
                    if lo < self.r_min {
                        report.push(
                            Assumption::H2,
                            Some(k),
                            format!("R is not positive definite (min eigenvalue {lo:.3e} < r_min {:.1e})", self.r_min),
                        );
                    }
                }
            }
        }
        let g = &c.g;
        let last = self.grid.steps();
        if !finite(g) {
            report.push(Assumption::H1, Some(last), "G has non-finite entries");
        } else if !is_symmetric(g, 1e-12) {
            report.push(Assumption::H2, Some(last), "G is not symmetric");
        } else {
            let (lo, _) = eigen_bounds(g);
            if lo < -1e-10 {
                report.push(Assumption::H2, Some(last), format!("G is not positive semidefinite (min eigenvalue {lo:.3e})"));
            }
        }
        report
    }
}

/// A validated problem with per-node caches for `R` and `R⁻¹`.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    r_weight: Vec<WeightMatrix>,
    r_inv: Vec<DMatrix<f64>>,
    strict_h1: bool,
}

impl Model {
    pub fn new(spec: ModelSpec, strict_h1: bool) -> Result<Self> {
        let report = spec.validate(strict_h1);
        if !report.is_empty() {
            return Err(Error::InvalidInput(report.to_string()));
        }
        let mut r_weight: Vec<WeightMatrix> = Vec::with_capacity(spec.grid.nodes());
        let mut r_inv: Vec<DMatrix<f64>> = Vec::with_capacity(spec.grid.nodes());
        for (k, r) in spec.coeffs.r.iter().enumerate() {
            if k > 0 && *r == spec.coeffs.r[k - 1] {
                r_weight.push(r_weight[k - 1].clone());
                r_inv.push(r_inv[k - 1].clone());
                continue;
            }
            let weight = WeightMatrix::new(r.clone())?;
            if weight.is_diagonal() {
                r_inv.push(DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| if i == j { 1.0 / r[(i, i)] } else { 0.0 }));
                r_weight.push(weight);
                continue;
            }
            r_weight.push(weight);
            let inv = r
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidInput(format!("R at node {k} is not positive definite")))?
                .inverse();
            r_inv.push(inv);
        }
        Ok(Self {
            spec,
            r_weight,
            r_inv,
            strict_h1,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn strict_h1(&self) -> bool {
        self.strict_h1
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.spec.grid
    }

    pub fn coeffs(&self) -> &Coefficients {
        &self.spec.coeffs
    }

    pub fn gamma(&self) -> &ConvexSet {
        &self.spec.gamma
    }

    pub fn x0(&self) -> &[f64] {
        self.spec.x0.as_slice()
    }

    pub fn r_weight(&self, k: usize) -> &WeightMatrix {
        &self.r_weight[k]
    }

    pub fn r_inv(&self, k: usize) -> &DMatrix<f64> {
        &self.r_inv[k]
    }

    /// The same model with a different constraint set.
    pub fn with_gamma(&self, gamma: ConvexSet) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.gamma = gamma;
        spec.check_shapes()?;
        Model::new(spec, self.strict_h1)
    }

    /// `P_Γ^R[0]`, the feasible control nearest to zero in the `R(t_k)` norm.
    pub fn zero_control(&self, k: usize) -> Result<Vec<f64>> {
        self.gamma().project_weighted(&vec![0.0; self.m()], &self.r_weight[k])
    }

    /// `R⁻¹(Bᵀp + Dᵀq)` at node `k`, before projection.
    pub fn unconstrained_control_into(&self, k: usize, p: &[f64], q: &[f64], out: &mut [f64]) {
        let m = self.m();
        let c = &self.spec.coeffs;
        let mut v = [0.0; MAX_DIM];
        let mut w = [0.0; MAX_DIM];
        matvec_t_into(&c.b[k], p, &mut v[..m]);
        matvec_t_into(&c.d[k], q, &mut w[..m]);
        for j in 0..m {
            v[j] += w[j];
        }
        matvec_into(&self.r_inv[k], &v[..m], out);
    }

    /// The control map `φ(t_k, p, q) = P_Γ^R[R⁻¹(Bᵀp + Dᵀq)]`.
    pub fn control_map_into(&self, k: usize, p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.m();
        let mut raw = [0.0; MAX_DIM];
        self.unconstrained_control_into(k, p, q, &mut raw[..m]);
        self.gamma().project_weighted_into(&raw[..m], &self.r_weight[k], out)
    }

    pub fn control_map(&self, k: usize, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m()];
        self.control_map_into(k, p, q, &mut out)?;
        Ok(out)
    }

    /// `⟨p, Ax + Bu + Fz + b⟩ + ⟨q, Du + σ⟩ − ½⟨Q(x−z), x−z⟩ − ½⟨Ru, u⟩` at node `k`.
    pub fn hamiltonian(&self, k: usize, p: &[f64], q: &[f64], x: &[f64], u: &[f64], z: &[f64]) -> Result<f64> {
        let violation = self.gamma().violation(u);
        if violation > FEASIBILITY_TOL {
            return Err(Error::ControlNotFeasible { violation });
        }
        let (n, m) = (self.n(), self.m());
        if p.len() != n || q.len() != n || x.len() != n || z.len() != n || u.len() != m {
            return Err(Error::ShapeMismatch("hamiltonian arguments".into()));
        }
        let c = &self.spec.coeffs;
        let mut drift = [0.0; MAX_DIM];
        let mut diff = [0.0; MAX_DIM];
        let mut tmp = [0.0; MAX_DIM];
        matvec_into(&c.a[k], x, &mut drift[..n]);
        for (mat, v) in [(&c.b[k], u), (&c.f[k], z)] {
            matvec_into(mat, v, &mut tmp[..n]);
            for i in 0..n {
                drift[i] += tmp[i];
            }
        }
        matvec_into(&c.d[k], u, &mut diff[..n]);
        let mut h = 0.0;
        let mut dev = [0.0; MAX_DIM];
        for i in 0..n {
            h += p[i] * (drift[i] + c.drift[k][i]) + q[i] * (diff[i] + c.sigma[k][i]);
            dev[i] = x[i] - z[i];
        }
        h -= 0.5 * quad_form(&c.q[k], &dev[..n]);
        h -= 0.5 * quad_form(&c.r[k], u);
        Ok(h)
    }

    /// `½(⟨Q(x − z), x − z⟩ + ⟨R u, u⟩)` at node `k`.
    #[inline]
    pub fn running_cost(&self, k: usize, x: &[f64], reference: &[f64], u: &[f64]) -> f64 {
        let n = self.n();
        let mut dev = [0.0; MAX_DIM];
        for i in 0..n {
            dev[i] = x[i] - reference[i];
        }
        let c = &self.spec.coeffs;
        0.5 * (quad_form(&c.q[k], &dev[..n]) + quad_form(&c.r[k], u))
    }

    #[inline]
    pub fn terminal_cost(&self, x: &[f64], reference: &[f64]) -> f64 {
        let n = self.n();
        let mut dev = [0.0; MAX_DIM];
        for i in 0..n {
            dev[i] = x[i] - reference[i];
        }
        0.5 * quad_form(&self.spec.coeffs.g, &dev[..n])
    }

    /// Left-endpoint quadrature of the cost along one path.
    ///
    /// `x` holds `K + 1` states, `u` holds `K` controls and `reference` holds
    /// `K + 1` reference states, all node-major.
    pub fn path_cost(&self, reference: &[f64], x: &[f64], u: &[f64]) -> f64 {
        let (n, m) = (self.n(), self.m());
        let steps = self.grid().steps();
        let dt = self.grid().dt();
        let mut acc = 0.0;
        for k in 0..steps {
            acc += self.running_cost(k, &x[k * n..(k + 1) * n], &reference[k * n..(k + 1) * n], &u[k * m..(k + 1) * m]);
        }
        acc * dt + self.terminal_cost(&x[steps * n..], &reference[steps * n..])
    }

    /// Monte Carlo limit cost against a frozen mean path. `x` and `u` hold
    /// `paths` trajectories back to back in the [`Self::path_cost`] layout.
    pub fn limit_cost(&self, z: &[f64], x: &[f64], u: &[f64], paths: usize) -> Result<f64> {
        let (n, m) = (self.n(), self.m());
        let nodes = self.grid().nodes();
        let steps = self.grid().steps();
        if paths == 0 || z.len() != nodes * n || x.len() != paths * nodes * n || u.len() != paths * steps * m {
            return Err(Error::ShapeMismatch(format!(
                "limit_cost: {paths} paths, z {}, x {}, u {}",
                z.len(),
                x.len(),
                u.len()
            )));
        }
        let costs: Vec<f64> = (0..paths)
            .map(|j| {
                self.path_cost(
                    z,
                    &x[j * nodes * n..(j + 1) * nodes * n],
                    &u[j * steps * m..(j + 1) * steps * m],
                )
            })
            .collect();
        Ok(crate::linalg::pairwise_sum(&costs) / paths as f64)
    }
}

/// Scalar (`n = m = 1`) instance builder with zero defaults apart from
/// `b_ctrl = q = r = horizon = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarInstance {
    pub a: f64,
    pub b_ctrl: f64,
    pub d: f64,
    pub f: f64,
    pub drift: f64,
    pub sigma: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub horizon: f64,
    pub steps: usize,
    pub x0: f64,
}

impl Default for ScalarInstance {
    fn default() -> Self {
        Self {
            a: 0.0,
            b_ctrl: 1.0,
            d: 0.0,
            f: 0.0,
            drift: 0.0,
            sigma: 0.0,
            q: 1.0,
            r: 1.0,
            g: 0.0,
            horizon: 1.0,
            steps: 100,
            x0: 0.0,
        }
    }
}

impl ScalarInstance {
    pub fn spec(&self, gamma: ConvexSet) -> Result<ModelSpec> {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let v = |x: f64| DVector::from_element(1, x);
        let grid = TimeGrid::new(self.horizon, self.steps)?;
        let coeffs = ConstantCoefficients {
            a: s(self.a),
            f: s(self.f),
            b: s(self.b_ctrl),
            d: s(self.d),
            drift: v(self.drift),
            sigma: v(self.sigma),
            q: s(self.q),
            r: s(self.r),
            g: s(self.g),
        }
        .broadcast(grid.nodes());
        ModelSpec::new(v(self.x0), grid, coeffs, gamma)
    }

    pub fn model(&self, gamma: ConvexSet) -> Result<Model> {
        Model::new(self.spec(gamma)?, true)
    }
}
