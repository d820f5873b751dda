//! Backward dynamic programming on a state lattice for scalar problems.
//!
//! The Euler transition `x' = x + (A x + B u + F z_k + b)dt + (D u + σ)√dt ξ`
//! is integrated against a 7-node Gauss–Hermite rule, off-lattice values
//! come from linear interpolation (linear extrapolation beyond the ends) and
//! the per-point minimisation over the feasible control interval is a
//! golden-section search. The interpolant of convex data is convex, so the
//! one-step objective is convex in `u` and golden section finds its minimum.

use rayon::prelude::*;

use crate::convex_sets::ConvexSet;
use crate::error::{Error, Result};
use crate::mean_field::MeanPath;
use crate::model::Model;

/// Standard normal quadrature nodes (probabilists' Hermite, 7 points).
pub const GAUSS_HERMITE_NODES: [f64; 7] = [
    -3.750_439_717_725_742,
    -2.366_759_410_734_541_3,
    -1.154_405_394_739_968_2,
    0.0,
    1.154_405_394_739_968_2,
    2.366_759_410_734_541_3,
    3.750_439_717_725_742,
];

/// Weights matching [`GAUSS_HERMITE_NODES`]; they sum to one.
pub const GAUSS_HERMITE_WEIGHTS: [f64; 7] = [
    5.482_688_559_722_184e-4,
    3.075_712_396_758_65e-2,
    0.240_123_178_605_012_7,
    0.457_142_857_142_857_1,
    0.240_123_178_605_012_7,
    3.075_712_396_758_65e-2,
    5.482_688_559_722_184e-4,
];

pub const DEFAULT_LATTICE_POINTS: usize = 801;
/// Half-width of the box that stands in for an unbounded control interval.
pub const CONTROL_SURROGATE_BOUND: f64 = 50.0;
/// Largest tolerated per-step probability mass leaving the lattice.
pub const EXIT_MASS_LIMIT: f64 = 1e-3;
pub const GOLDEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Lattice {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) || points < 3 {
            return Err(Error::InvalidInput(format!(
                "lattice [{lower}, {upper}] with {points} points is not usable"
            )));
        }
        Ok(Self { lower, upper, points })
    }

    /// Bounds spanning the uncontrolled mean (and the mean under each finite
    /// end of the control interval), the frozen mean path and `x0`, widened
    /// by six terminal standard deviations of the uncontrolled state.
    pub fn covering(model: &Model, z: &MeanPath, points: usize) -> Result<Self> {
        check_scalar(model)?;
        let (lo_u, hi_u) = control_interval(model.gamma())?;
        let c = model.coeffs();
        let dt = model.grid().dt();
        let steps = model.grid().steps();
        let x0 = model.x0()[0];
        let mut lo = x0;
        let mut hi = x0;
        for k in 0..=steps {
            lo = lo.min(z.at(k)[0]);
            hi = hi.max(z.at(k)[0]);
        }
        let mut variance = 0.0;
        for u in [lo_u, hi_u, 0.0] {
            if u.abs() >= CONTROL_SURROGATE_BOUND {
                continue;
            }
            let mut mean = x0;
            variance = 0.0;
            for k in 0..steps {
                let a = c.a[k][(0, 0)];
                mean += (a * mean + c.b[k][(0, 0)] * u + c.f[k][(0, 0)] * z.at(k)[0] + c.drift[k][0]) * dt;
                let vol = c.sigma[k][0];
                variance = variance * (1.0 + a * dt).powi(2) + vol * vol * dt;
                lo = lo.min(mean);
                hi = hi.max(mean);
            }
        }
        let half = (6.0 * variance.sqrt()).max(1.0);
        Lattice::new(lo - half, hi + half, points)
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.points - 1 {
            self.upper
        } else {
            self.lower + j as f64 * self.spacing()
        }
    }

    /// Linear interpolation of lattice `values` at `x`, extrapolating with
    /// the end-cell slope outside the lattice.
    #[inline]
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let pos = (x - self.lower) / self.spacing();
        let j = (pos.floor().max(0.0) as usize).min(self.points - 2);
        let t = pos - j as f64;
        values[j] + t * (values[j + 1] - values[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpTable {
    pub lattice: Lattice,
    /// `values[k][j]` for nodes `k = 0..=K`.
    pub values: Vec<Vec<f64>>,
    /// `policy[k][j]` for nodes `k = 0..K`.
    pub policy: Vec<Vec<f64>>,
}

impl DpTable {
    pub fn value_at(&self, k: usize, x: f64) -> f64 {
        self.lattice.interpolate(&self.values[k], x)
    }

    pub fn policy_at(&self, k: usize, x: f64) -> f64 {
        self.lattice.interpolate(&self.policy[k], x)
    }
}

fn check_scalar(model: &Model) -> Result<()> {
    if model.n() != 1 || model.m() != 1 {
        return Err(Error::InvalidInput(format!(
            "the lattice solver needs n = m = 1, got n = {}, m = {}",
            model.n(),
            model.m()
        )));
    }
    Ok(())
}

/// The scalar constraint set as an interval, with unbounded ends replaced by
/// `±CONTROL_SURROGATE_BOUND`.
pub fn control_interval(gamma: &ConvexSet) -> Result<(f64, f64)> {
    let w = CONTROL_SURROGATE_BOUND;
    if gamma.dim() != 1 {
        return Err(Error::InvalidInput("control interval needs a one-dimensional set".into()));
    }
    Ok(match gamma {
        ConvexSet::FullSpace { .. } => (-w, w),
        ConvexSet::NonnegativeOrthant { .. } => (0.0, w),
        ConvexSet::Box { lower, upper } => (lower[0].max(-w), upper[0].min(w)),
        ConvexSet::Ball { center, radius } => (center[0] - radius, center[0] + radius),
        ConvexSet::HalfSpace { normal, offset } => {
            let edge = offset / normal[0];
            if normal[0] > 0.0 {
                (-w, edge)
            } else {
                (edge, w)
            }
        }
        ConvexSet::Singleton { point } => (point[0], point[0]),
    })
}

/// Minimiser of a convex function on `[lo, hi]` by golden-section search.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    if hi - lo <= tol {
        return 0.5 * (lo + hi);
    }
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // The interval endpoints are never evaluated by the interior probes.
    let mut best = (f(mid), mid);
    for edge in [lo, hi] {
        if (mid - edge).abs() <= tol {
            let v = f(edge);
            if v < best.0 {
                best = (v, edge);
            }
        }
    }
    best.1
}

/// Solves the frozen-mean scalar problem on `lattice`.
pub fn solve_dp_1d(model: &Model, z: &MeanPath, lattice: Lattice) -> Result<DpTable> {
    check_scalar(model)?;
    if z.nodes() != model.grid().nodes() || z.dim() != 1 {
        return Err(Error::ShapeMismatch("mean path does not match the grid".into()));
    }
    let (u_lo, u_hi) = control_interval(model.gamma())?;
    let steps = model.grid().steps();
    let dt = model.grid().dt();
    let sq = dt.sqrt();
    let c = model.coeffs();
    let g = c.g[(0, 0)];
    let z_t = z.at(steps)[0];

    let mut values = vec![Vec::new(); steps + 1];
    let mut policy = vec![Vec::new(); steps];
    values[steps] = (0..lattice.points)
        .map(|j| 0.5 * g * (lattice.x(j) - z_t).powi(2))
        .collect();

    for k in (0..steps).rev() {
        let (a, b, d) = (c.a[k][(0, 0)], c.b[k][(0, 0)], c.d[k][(0, 0)]);
        let (q, r, f) = (c.q[k][(0, 0)], c.r[k][(0, 0)], c.f[k][(0, 0)]);
        let (drift, sigma) = (c.drift[k][0], c.sigma[k][0]);
        let zk = z.at(k)[0];
        let next = &values[k + 1];
        let row: Vec<(f64, f64)> = (0..lattice.points)
            .into_par_iter()
            .map(|j| {
                let x = lattice.x(j);
                let state_cost = 0.5 * q * (x - zk).powi(2) * dt;
                let objective = |u: f64| {
                    let mean = x + (a * x + b * u + f * zk + drift) * dt;
                    let vol = (d * u + sigma) * sq;
                    let mut ev = 0.0;
                    for i in 0..7 {
                        ev += GAUSS_HERMITE_WEIGHTS[i] * lattice.interpolate(next, mean + vol * GAUSS_HERMITE_NODES[i]);
                    }
                    0.5 * r * u * u * dt + ev
                };
                let u = golden_section(objective, u_lo, u_hi, GOLDEN_TOL);
                (state_cost + objective(u), u)
            })
            .collect();
        values[k] = row.iter().map(|p| p.0).collect();
        policy[k] = row.iter().map(|p| p.1).collect();
    }
    let table = DpTable { lattice, values, policy };
    check_exit_mass(model, z, &table)?;
    Ok(table)
}

/// Propagates the law of the state under the tabulated policy through the
/// quadrature transitions and fails if too much mass leaves the lattice in
/// any single step.
fn check_exit_mass(model: &Model, z: &MeanPath, table: &DpTable) -> Result<()> {
    let lattice = table.lattice;
    let steps = model.grid().steps();
    let dt = model.grid().dt();
    let sq = dt.sqrt();
    let c = model.coeffs();
    let h = lattice.spacing();
    let mut mass = vec![0.0; lattice.points];
    let deposit = |mass: &mut Vec<f64>, x: f64, w: f64| -> bool {
        if x < lattice.lower || x > lattice.upper {
            return false;
        }
        let pos = (x - lattice.lower) / h;
        let j = (pos.floor() as usize).min(lattice.points - 2);
        let t = pos - j as f64;
        mass[j] += w * (1.0 - t);
        mass[j + 1] += w * t;
        true
    };
    if !deposit(&mut mass, model.x0()[0], 1.0) {
        return Err(Error::LatticeTooNarrow { step: 0, mass: 1.0 });
    }
    for k in 0..steps {
        let (a, b, d) = (c.a[k][(0, 0)], c.b[k][(0, 0)], c.d[k][(0, 0)]);
        let (f, drift, sigma) = (c.f[k][(0, 0)], c.drift[k][0], c.sigma[k][0]);
        let zk = z.at(k)[0];
        let mut next = vec![0.0; lattice.points];
        let mut exited = 0.0;
        for (j, &w) in mass.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let x = lattice.x(j);
            let u = table.policy[k][j];
            let mean = x + (a * x + b * u + f * zk + drift) * dt;
            let vol = (d * u + sigma) * sq;
            for i in 0..7 {
                let wi = w * GAUSS_HERMITE_WEIGHTS[i];
                if !deposit(&mut next, mean + vol * GAUSS_HERMITE_NODES[i], wi) {
                    exited += wi;
                }
            }
        }
        if exited >= EXIT_MASS_LIMIT {
            return Err(Error::LatticeTooNarrow { step: k, mass: exited });
        }
        mass = next;
    }
    Ok(())
}
