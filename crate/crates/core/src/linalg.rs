//! Small dense helpers: cyclic Jacobi eigenvalues, symmetry checks and
//! allocation-free mat-vec kernels used in the per-path hot loops.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix,
/// computed with the cyclic Jacobi rotation method.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_bounds(a: &DMatrix<f64>) -> (f64, f64) {
    let (vals, _) = symmetric_eigen(a);
    (vals[0], vals[vals.len() - 1])
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `‖A − Aᵀ‖_max ≤ rel · ‖A‖_max` (an all-zero matrix counts as symmetric).
pub fn is_symmetric(a: &DMatrix<f64>, rel: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = max_abs(a);
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst <= rel * scale
}

/// Symmetric square root `A^{1/2}` of an SPD matrix.
pub fn sqrt_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = symmetric_eigen(a);
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| v.max(0.0).sqrt()),
    ));
    &vecs * d * vecs.transpose()
}

/// `out = A x` for a column-major `A`.
#[inline]
pub fn matvec_into(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = a.shape();
    debug_assert_eq!(x.len(), c);
    debug_assert_eq!(out.len(), r);
    out.iter_mut().for_each(|o| *o = 0.0);
    let data = a.as_slice();
    for j in 0..c {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * r..(j + 1) * r];
        for i in 0..r {
            out[i] += col[i] * xj;
        }
    }
}

/// `out += A x`.
#[inline]
pub fn matvec_add(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = a.shape();
    let data = a.as_slice();
    for j in 0..c {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * r..(j + 1) * r];
        for i in 0..r {
            out[i] += col[i] * xj;
        }
    }
}

/// `out = Aᵀ x`.
#[inline]
pub fn matvec_t_into(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = a.shape();
    debug_assert_eq!(x.len(), r);
    debug_assert_eq!(out.len(), c);
    let data = a.as_slice();
    for j in 0..c {
        let col = &data[j * r..(j + 1) * r];
        out[j] = col.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `⟨x, A x⟩`.
#[inline]
pub fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let (r, c) = a.shape();
    let data = a.as_slice();
    let mut acc = 0.0;
    for j in 0..c {
        let col = &data[j * r..(j + 1) * r];
        let mut s = 0.0;
        for i in 0..r {
            s += col[i] * x[i];
        }
        acc += s * x[j];
    }
    acc
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Pairwise (tree) summation: deterministic and with `O(log n)` error growth.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_known_spectrum() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, vecs) = symmetric_eigen(&a);
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
        let recon = &vecs * DMatrix::from_diagonal(&DVector::from_vec(vals)) * vecs.transpose();
        assert!((recon - a).abs().max() < 1e-13);
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let n = 6;
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let a = &b + b.transpose();
        let (vals, vecs) = symmetric_eigen(&a);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let recon = &vecs * DMatrix::from_diagonal(&DVector::from_vec(vals)) * vecs.transpose();
        assert!((recon - &a).abs().max() < 1e-12);
        let ortho = vecs.transpose() * &vecs - DMatrix::identity(n, n);
        assert!(ortho.abs().max() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sqrt_spd(&a);
        assert!((&s * &s - a).abs().max() < 1e-13);
    }

    #[test]
    fn kernels_agree_with_nalgebra() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = [0.3, -2.0, 1.5];
        let mut out = [0.0; 2];
        matvec_into(&a, &x, &mut out);
        let expect = &a * DVector::from_row_slice(&x);
        assert!((out[0] - expect[0]).abs() < 1e-15 && (out[1] - expect[1]).abs() < 1e-15);
        let y = [1.0, 2.0];
        let mut t = [0.0; 3];
        matvec_t_into(&a, &y, &mut t);
        let expect_t = a.transpose() * DVector::from_row_slice(&y);
        for i in 0..3 {
            assert!((t[i] - expect_t[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let xs: Vec<f64> = (1..=10_000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 50_005_000.0);
    }
}
