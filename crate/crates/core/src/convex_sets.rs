//! Closed convex constraint sets, Euclidean and `R`-weighted projections.
//!
//! The weighted projection minimises `‖y − x‖²_R = (y − x)ᵀ R (y − x)` over the
//! set. When `R` is diagonal and the set is a product of intervals the problem
//! separates and the coordinate clamp is exact; every other case runs
//! projected gradient descent with step `1/λ_max(R)` on top of the exact
//! Euclidean projection.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{dot, eigen_bounds, is_symmetric, matvec_into, max_abs, norm};

/// Successive-iterate tolerance for the weighted projected-gradient path.
pub const PGD_TOL: f64 = 1e-12;
/// Iteration budget for the weighted projected-gradient path.
pub const PGD_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    FullSpace { dim: usize },
    NonnegativeOrthant { dim: usize },
    /// Coordinate bounds; `±∞` entries give one-sided constraints.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{y : ⟨normal, y⟩ ≤ offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Singleton { point: Vec<f64> },
}

impl ConvexSet {
    pub fn full(dim: usize) -> Self {
        ConvexSet::FullSpace { dim }
    }

    pub fn orthant(dim: usize) -> Self {
        ConvexSet::NonnegativeOrthant { dim }
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let set = ConvexSet::Box { lower, upper };
        set.validate()?;
        Ok(set)
    }

    /// One-dimensional interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(vec![lo], vec![hi])
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let set = ConvexSet::Ball { center, radius };
        set.validate()?;
        Ok(set)
    }

    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let set = ConvexSet::HalfSpace { normal, offset };
        set.validate()?;
        Ok(set)
    }

    pub fn singleton(point: Vec<f64>) -> Result<Self> {
        let set = ConvexSet::Singleton { point };
        set.validate()?;
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::FullSpace { dim } | ConvexSet::NonnegativeOrthant { dim } => *dim,
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::HalfSpace { normal, .. } => normal.len(),
            ConvexSet::Singleton { point } => point.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConvexSet::FullSpace { .. } => "full",
            ConvexSet::NonnegativeOrthant { .. } => "orthant",
            ConvexSet::Box { .. } => "box",
            ConvexSet::Ball { .. } => "ball",
            ConvexSet::HalfSpace { .. } => "halfspace",
            ConvexSet::Singleton { .. } => "singleton",
        }
    }

    /// Checks the variant invariants (nonempty, finite parameters).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.dim() == 0 {
            return bad("constraint set has dimension 0".into());
        }
        match self {
            ConvexSet::FullSpace { .. } | ConvexSet::NonnegativeOrthant { .. } => Ok(()),
            ConvexSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return bad(format!(
                        "box bounds have lengths {} and {}",
                        lower.len(),
                        upper.len()
                    ));
                }
                for (j, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if l.is_nan() || u.is_nan() || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                        return bad(format!("box bound {j} is not admissible: [{l}, {u}]"));
                    }
                    if l > u {
                        return bad(format!("box is empty in coordinate {j}: {l} > {u}"));
                    }
                }
                Ok(())
            }
            ConvexSet::Ball { center, radius } => {
                if center.iter().any(|c| !c.is_finite()) {
                    return bad("ball center must be finite".into());
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return bad(format!("ball radius must be positive, got {radius}"));
                }
                Ok(())
            }
            ConvexSet::HalfSpace { normal, offset } => {
                if normal.iter().any(|c| !c.is_finite()) || !offset.is_finite() {
                    return bad("half-space parameters must be finite".into());
                }
                if norm(normal) == 0.0 {
                    return bad("half-space normal must be nonzero".into());
                }
                Ok(())
            }
            ConvexSet::Singleton { point } => {
                if point.iter().any(|c| !c.is_finite()) {
                    return bad("singleton point must be finite".into());
                }
                Ok(())
            }
        }
    }

    /// A canonical member of the set.
    pub fn witness(&self) -> Vec<f64> {
        match self {
            ConvexSet::FullSpace { dim } | ConvexSet::NonnegativeOrthant { dim } => vec![0.0; *dim],
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| match (l.is_finite(), u.is_finite()) {
                    (true, true) => 0.5 * (l + u),
                    (true, false) => l,
                    (false, true) => u,
                    (false, false) => 0.0,
                })
                .collect(),
            ConvexSet::Ball { center, .. } => center.clone(),
            ConvexSet::HalfSpace { normal, offset } => {
                let s = offset / dot(normal, normal);
                normal.iter().map(|a| a * s).collect()
            }
            ConvexSet::Singleton { point } => point.clone(),
        }
    }

    /// Largest violation of the defining inequalities (0 for members).
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            ConvexSet::FullSpace { .. } => 0.0,
            ConvexSet::NonnegativeOrthant { .. } => x.iter().fold(0.0_f64, |a, &v| a.max(-v)),
            ConvexSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .fold(0.0_f64, |a, (&v, (&l, &u))| a.max(l - v).max(v - u)),
            ConvexSet::Ball { center, radius } => {
                let d: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                (d.sqrt() - radius).max(0.0)
            }
            ConvexSet::HalfSpace { normal, offset } => {
                ((dot(normal, x) - offset) / norm(normal)).max(0.0)
            }
            ConvexSet::Singleton { point } => x
                .iter()
                .zip(point)
                .fold(0.0_f64, |a, (v, p)| a.max((v - p).abs())),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim() && self.violation(x) <= tol
    }

    /// Euclidean projection written into `out`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            ConvexSet::FullSpace { .. } => out.copy_from_slice(x),
            ConvexSet::NonnegativeOrthant { .. } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = v.max(0.0);
                }
            }
            ConvexSet::Box { lower, upper } => {
                for j in 0..x.len() {
                    out[j] = x[j].max(lower[j]).min(upper[j]);
                }
            }
            ConvexSet::Ball { center, radius } => {
                let d2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                if d2 <= radius * radius {
                    out.copy_from_slice(x);
                } else {
                    let s = radius / d2.sqrt();
                    for j in 0..x.len() {
                        out[j] = center[j] + s * (x[j] - center[j]);
                    }
                }
            }
            ConvexSet::HalfSpace { normal, offset } => {
                let excess = dot(normal, x) - offset;
                if excess <= 0.0 {
                    out.copy_from_slice(x);
                } else {
                    let s = excess / dot(normal, normal);
                    for j in 0..x.len() {
                        out[j] = x[j] - s * normal[j];
                    }
                }
            }
            ConvexSet::Singleton { point } => out.copy_from_slice(point),
        }
    }

    /// Euclidean projection `P[x]`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.project_into(x, &mut out);
        out
    }

    fn is_product_of_intervals(&self) -> bool {
        matches!(
            self,
            ConvexSet::FullSpace { .. }
                | ConvexSet::NonnegativeOrthant { .. }
                | ConvexSet::Box { .. }
                | ConvexSet::Singleton { .. }
        )
    }

    /// Projection in the `‖·‖_R` norm, written into `out`.
    pub fn project_weighted_into(&self, x: &[f64], r: &WeightMatrix, out: &mut [f64]) -> Result<()> {
        match self {
            ConvexSet::FullSpace { .. } => {
                out.copy_from_slice(x);
                return Ok(());
            }
            ConvexSet::Singleton { point } => {
                out.copy_from_slice(point);
                return Ok(());
            }
            _ => {}
        }
        if r.is_diagonal() && self.is_product_of_intervals() {
            self.project_into(x, out);
            return Ok(());
        }
        self.project_weighted_pgd(x, r, out)
    }

    pub fn project_weighted(&self, x: &[f64], r: &WeightMatrix) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.project_weighted_into(x, r, &mut out)?;
        Ok(out)
    }

    fn project_weighted_pgd(&self, x: &[f64], r: &WeightMatrix, out: &mut [f64]) -> Result<()> {
        let m = x.len();
        let step = 1.0 / r.lambda_max;
        let mut y = self.project(x);
        let mut diff = vec![0.0; m];
        let mut grad = vec![0.0; m];
        let mut trial = vec![0.0; m];
        let mut next = vec![0.0; m];
        let mut last_step = f64::INFINITY;
        for _ in 0..PGD_MAX_ITER {
            for j in 0..m {
                diff[j] = y[j] - x[j];
            }
            matvec_into(&r.matrix, &diff, &mut grad);
            for j in 0..m {
                trial[j] = y[j] - step * grad[j];
            }
            self.project_into(&trial, &mut next);
            last_step = next
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            std::mem::swap(&mut y, &mut next);
            let floor = PGD_TOL.max(4.0 * f64::EPSILON * norm(&y));
            if last_step <= floor {
                out.copy_from_slice(&y);
                return Ok(());
            }
        }
        Err(Error::NonConvergence {
            iterations: PGD_MAX_ITER,
            last_step,
            condition_number: r.condition_number(),
        })
    }
}

/// Symmetric positive definite weight defining `‖x‖²_R = ⟨R x, x⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    matrix: DMatrix<f64>,
    lambda_min: f64,
    lambda_max: f64,
    diagonal: bool,
}

impl WeightMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "weight matrix must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("weight matrix has non-finite entries".into()));
        }
        if !is_symmetric(&matrix, 1e-12) {
            return Err(Error::InvalidInput("weight matrix is not symmetric".into()));
        }
        let (lambda_min, lambda_max) = eigen_bounds(&matrix);
        if lambda_min <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "weight matrix is not positive definite (min eigenvalue {lambda_min:.3e})"
            )));
        }
        let scale = max_abs(&matrix);
        let diagonal = (0..matrix.nrows())
            .all(|i| (0..matrix.ncols()).all(|j| i == j || matrix[(i, j)].abs() <= 1e-15 * scale));
        Ok(Self {
            matrix,
            lambda_min,
            lambda_max,
            diagonal,
        })
    }

    pub fn identity(m: usize) -> Self {
        Self::new(DMatrix::identity(m, m)).expect("identity is SPD")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn condition_number(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }

    /// `⟨R a, b⟩`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut ra = vec![0.0; a.len()];
        matvec_into(&self.matrix, a, &mut ra);
        dot(&ra, b)
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).max(0.0).sqrt()
    }
}

/// `max_z ⟨R(y − x), y − z⟩` over the probes; `≤ tol` certifies that `y` is
/// the weighted projection of `x` up to `tol` on the probe set. Returns `−∞`
/// for an empty probe list.
pub fn characterization_residual(
    set: &ConvexSet,
    x: &[f64],
    y: &[f64],
    r: &WeightMatrix,
    probes: &[Vec<f64>],
) -> Result<f64> {
    const MEMBERSHIP_TOL: f64 = 1e-9;
    let m = set.dim();
    if x.len() != m || y.len() != m || r.dim() != m {
        return Err(Error::ShapeMismatch(format!(
            "set has dimension {m}, x {}, y {}, R {}",
            x.len(),
            y.len(),
            r.dim()
        )));
    }
    let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let mut rd = vec![0.0; m];
    matvec_into(r.matrix(), &diff, &mut rd);
    let mut worst = f64::NEG_INFINITY;
    for (index, z) in probes.iter().enumerate() {
        if z.len() != m {
            return Err(Error::ShapeMismatch(format!("probe {index} has length {}", z.len())));
        }
        let violation = set.violation(z);
        if violation > MEMBERSHIP_TOL {
            return Err(Error::ProbeNotInSet { index, violation });
        }
        let value: f64 = rd.iter().zip(y.iter().zip(z)).map(|(g, (a, b))| g * (a - b)).sum();
        worst = worst.max(value);
    }
    Ok(worst)
}
