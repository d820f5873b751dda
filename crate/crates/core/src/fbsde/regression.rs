//! Least-squares projection onto polynomials of the state.
//!
//! The state is standardised per node (sample mean and standard deviation)
//! before the monomials are formed, which keeps the Gram matrix well scaled
//! for cubic bases. Normal equations carry a `1e-10` ridge on every column
//! except the intercept, so constant targets are reproduced without bias
//! and degenerate (deterministic) ensembles stay solvable.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;

pub const RIDGE: f64 = 1e-10;
/// Largest supported basis; prediction keeps its scratch on the stack.
pub const MAX_BASIS: usize = 1024;
const CHUNK: usize = 2048;

/// Total-degree monomial basis in `n` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    n: usize,
    degree: usize,
    /// `exponents[l * n + i]` is the power of coordinate `i` in monomial `l`.
    exponents: Vec<u8>,
}

impl MonomialBasis {
    pub fn new(n: usize, degree: usize) -> Result<Self> {
        if n == 0 || !(1..=15).contains(&degree) {
            return Err(Error::InvalidInput("basis needs n ≥ 1 and 1 ≤ degree ≤ 15".into()));
        }
        let mut exponents = Vec::new();
        let mut current = vec![0u8; n];
        for total in 0..=degree {
            push_compositions(&mut exponents, &mut current, 0, total);
        }
        let basis = Self { n, degree, exponents };
        if basis.len() > MAX_BASIS {
            return Err(Error::InvalidInput(format!(
                "basis of degree {degree} in {n} variables has {} terms (limit {MAX_BASIS})",
                basis.len()
            )));
        }
        Ok(basis)
    }

    pub fn len(&self) -> usize {
        self.exponents.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Evaluates every monomial at the standardised point `xi`.
    #[inline]
    pub fn eval_into(&self, xi: &[f64], out: &mut [f64]) {
        let n = self.n;
        let d = self.degree;
        let mut powers = [[1.0; 16]; crate::model::MAX_DIM];
        for i in 0..n {
            for e in 1..=d.min(15) {
                powers[i][e] = powers[i][e - 1] * xi[i];
            }
        }
        for (l, o) in out.iter_mut().enumerate().take(self.len()) {
            let mut v = 1.0;
            for i in 0..n {
                v *= powers[i][self.exponents[l * n + i] as usize];
            }
            *o = v;
        }
    }
}

fn push_compositions(out: &mut Vec<u8>, current: &mut [u8], index: usize, remaining: usize) {
    if index == current.len() - 1 {
        current[index] = remaining as u8;
        out.extend_from_slice(current);
        return;
    }
    for e in (0..=remaining).rev() {
        current[index] = e as u8;
        push_compositions(out, current, index + 1, remaining - e);
    }
}

/// Per-node standardisation and fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// `p_coef[l * n + i]`: coefficient of monomial `l` for output `i` of the
    /// conditional mean `E[p_{k+1} | x_k]`.
    pub p_coef: Vec<f64>,
    /// Coefficients of `q_k` (already divided by `dt`).
    pub q_coef: Vec<f64>,
    /// Mean squared residual of the `p` regression.
    pub residual: f64,
}

impl NodeFit {
    #[inline]
    fn features(&self, basis: &MonomialBasis, x: &[f64], psi: &mut [f64]) {
        let mut xi = [0.0; crate::model::MAX_DIM];
        for i in 0..basis.dim() {
            xi[i] = (x[i] - self.center[i]) / self.scale[i];
        }
        basis.eval_into(&xi[..basis.dim()], psi);
    }

    /// Conditional mean `E[p_{k+1} | x_k = x]` and `q_k(x)`.
    #[inline]
    pub fn predict(&self, basis: &MonomialBasis, x: &[f64], p_mean: &mut [f64], q: &mut [f64]) {
        let len = basis.len();
        let n = basis.dim();
        let mut psi = [0.0; MAX_BASIS];
        self.features(basis, x, &mut psi[..len]);
        for i in 0..n {
            let (mut a, mut b) = (0.0, 0.0);
            for l in 0..len {
                a += psi[l] * self.p_coef[l * n + i];
                b += psi[l] * self.q_coef[l * n + i];
            }
            p_mean[i] = a;
            q[i] = b;
        }
    }
}

/// Design matrix for one node: the features of every path and the factored
/// normal equations.
pub struct Design {
    len: usize,
    paths: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Row-major `paths × len` features.
    psi: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Design {
    /// `xs` holds `paths` states of dimension `basis.dim()` back to back.
    pub fn new(basis: &MonomialBasis, xs: &[f64], node: usize) -> Result<Self> {
        let n = basis.dim();
        let paths = xs.len() / n;
        let len = basis.len();
        let mut center = vec![0.0; n];
        let mut scale = vec![1.0; n];
        let mut col = vec![0.0; paths];
        for i in 0..n {
            for j in 0..paths {
                col[j] = xs[j * n + i];
            }
            let mean = pairwise_sum(&col) / paths as f64;
            for v in col.iter_mut() {
                *v = (*v - mean) * (*v - mean);
            }
            let sd = (pairwise_sum(&col) / paths as f64).sqrt();
            center[i] = mean;
            scale[i] = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
        }
        let mut psi = vec![0.0; paths * len];
        psi.par_chunks_mut(len * CHUNK).enumerate().for_each(|(c, block)| {
            let mut xi = [0.0; crate::model::MAX_DIM];
            for (r, row) in block.chunks_mut(len).enumerate() {
                let j = c * CHUNK + r;
                for i in 0..n {
                    xi[i] = (xs[j * n + i] - center[i]) / scale[i];
                }
                basis.eval_into(&xi[..n], row);
            }
        });
        let partial: Vec<Vec<f64>> = psi
            .par_chunks(len * CHUNK)
            .map(|block| {
                let mut g = vec![0.0; len * len];
                for row in block.chunks(len) {
                    for a in 0..len {
                        let ra = row[a];
                        for b in a..len {
                            g[a * len + b] += ra * row[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::zeros(len, len);
        for a in 0..len {
            for b in a..len {
                let v = partial.iter().map(|g| g[a * len + b]).sum::<f64>() / paths as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
            if a > 0 {
                gram[(a, a)] += RIDGE;
            }
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::RegressionRankDeficient { node });
        }
        let chol = gram.cholesky().ok_or(Error::RegressionRankDeficient { node })?;
        Ok(Self {
            len,
            paths,
            center,
            scale,
            psi,
            chol,
        })
    }

    /// Least-squares coefficients (`len × outputs`, entry `l * outputs + i`)
    /// for targets `ys` holding `outputs` values per path.
    pub fn solve(&self, ys: &[f64], outputs: usize, node: usize) -> Result<Vec<f64>> {
        let len = self.len;
        let partial: Vec<Vec<f64>> = self
            .psi
            .par_chunks(len * CHUNK)
            .zip(ys.par_chunks(outputs * CHUNK))
            .map(|(block, yblock)| {
                let mut acc = vec![0.0; len * outputs];
                for (row, y) in block.chunks(len).zip(yblock.chunks(outputs)) {
                    for l in 0..len {
                        for i in 0..outputs {
                            acc[l * outputs + i] += row[l] * y[i];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut rhs = DMatrix::zeros(len, outputs);
        for l in 0..len {
            for i in 0..outputs {
                rhs[(l, i)] = partial.iter().map(|a| a[l * outputs + i]).sum::<f64>() / self.paths as f64;
            }
        }
        let sol = self.chol.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::RegressionRankDeficient { node });
        }
        let mut coef = vec![0.0; len * outputs];
        for l in 0..len {
            for i in 0..outputs {
                coef[l * outputs + i] = sol[(l, i)];
            }
        }
        Ok(coef)
    }

    /// Fitted values for every path.
    pub fn predict_all(&self, coef: &[f64], outputs: usize) -> Vec<f64> {
        let len = self.len;
        let mut out = vec![0.0; self.paths * outputs];
        out.par_chunks_mut(outputs * CHUNK)
            .zip(self.psi.par_chunks(len * CHUNK))
            .for_each(|(oblock, block)| {
                for (o, row) in oblock.chunks_mut(outputs).zip(block.chunks(len)) {
                    for i in 0..outputs {
                        let mut v = 0.0;
                        for l in 0..len {
                            v += row[l] * coef[l * outputs + i];
                        }
                        o[i] = v;
                    }
                }
            });
        out
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(MonomialBasis::new(1, 3).unwrap().len(), 4);
        assert_eq!(MonomialBasis::new(2, 3).unwrap().len(), 10);
        assert_eq!(MonomialBasis::new(3, 2).unwrap().len(), 10);
    }

    #[test]
    fn basis_values() {
        let b = MonomialBasis::new(2, 2).unwrap();
        let mut out = vec![0.0; b.len()];
        b.eval_into(&[2.0, 3.0], &mut out);
        let mut sorted = out.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn recovers_a_cubic_exactly() {
        let basis = MonomialBasis::new(1, 3).unwrap();
        let xs: Vec<f64> = (0..500).map(|j| -2.0 + j as f64 * 0.01).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let design = Design::new(&basis, &xs, 0).unwrap();
        let coef = design.solve(&ys, 1, 0).unwrap();
        let fit = design.predict_all(&coef, 1);
        for (a, b) in fit.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_states_fit_the_mean() {
        let basis = MonomialBasis::new(1, 3).unwrap();
        let xs = vec![0.7; 100];
        let ys: Vec<f64> = (0..100).map(|j| j as f64).collect();
        let design = Design::new(&basis, &xs, 0).unwrap();
        let coef = design.solve(&ys, 1, 0).unwrap();
        let fit = design.predict_all(&coef, 1);
        assert!(fit.iter().all(|v| (v - 49.5).abs() < 1e-12));
        let zero = design.solve(&vec![0.0; 100], 1, 0).unwrap();
        assert!(zero.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn two_outputs_in_two_dimensions() {
        let basis = MonomialBasis::new(2, 1).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for a in 0..20 {
            for b in 0..20 {
                let (x1, x2) = (a as f64 * 0.1, b as f64 * 0.3 - 1.0);
                xs.extend_from_slice(&[x1, x2]);
                ys.extend_from_slice(&[3.0 * x1 - x2, 0.5 + x2]);
            }
        }
        let design = Design::new(&basis, &xs, 0).unwrap();
        let coef = design.solve(&ys, 2, 0).unwrap();
        let fit = design.predict_all(&coef, 2);
        for (a, b) in fit.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-8);
        }
        // Pointwise prediction agrees with the batch path.
        let nf = NodeFit {
            center: design.center().to_vec(),
            scale: design.scale().to_vec(),
            p_coef: coef.clone(),
            q_coef: coef,
            residual: 0.0,
        };
        let (mut p, mut q) = ([0.0; 2], [0.0; 2]);
        nf.predict(&basis, &xs[6..8], &mut p, &mut q);
        assert!((p[0] - fit[6]).abs() < 1e-12 && (q[1] - fit[7]).abs() < 1e-12);
    }
}
