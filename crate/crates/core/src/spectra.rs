//! Symmetric eigendecomposition by cyclic Jacobi rotations, and projection
//! onto the positive-semidefinite cone.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAX_SWEEPS: usize = 100;

/// Inputs whose `max |A - A^T|` exceeds this (relative to `max(1, max |A|)`)
/// are rejected rather than symmetrized.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`; its
    /// largest-magnitude component is positive.
    pub vectors: Matrix,
}

impl EigenDecomposition {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.vectors.dim();
        (0..n).map(|i| self.vectors[(i, k)]).collect()
    }

    /// `sum_k f(e_k) u_k u_k^T`, skipping terms where `f` returns zero.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.vectors.dim();
        let weights: Vec<f64> = self.values.iter().map(|&e| f(e)).collect();
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for (k, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        acc += w * self.vectors[(i, k)] * self.vectors[(j, k)];
                    }
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|e| e)
    }

    pub fn min_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// Spectral norm `max |e_k|`.
    pub fn spectral_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |acc, e| acc.max(e.abs()))
    }
}

fn checked_symmetric(a: &Matrix) -> Result<Matrix> {
    let deviation = a.asymmetry();
    if deviation > SYMMETRY_TOLERANCE * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { deviation });
    }
    let mut s = a.clone();
    s.symmetrize();
    Ok(s)
}

/// Applies the rotation zeroing `a[p][q]` to `a` (both sides) and `v` (right).
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.dim();

    a[(p, p)] = app - t * apq;
    a[(q, q)] = aqq + t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        a[(k, p)] = np;
        a[(p, k)] = np;
        a[(k, q)] = nq;
        a[(q, k)] = nq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(A + A^T) / 2` first; asymmetry beyond
/// round-off is an error.
pub fn eigh(a: &Matrix) -> Result<EigenDecomposition> {
    let mut work = checked_symmetric(a)?;
    let n = work.dim();
    let mut v = Matrix::identity(n);
    let scale = work.frobenius_norm();

    if scale > 0.0 {
        for sweep in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += work[(p, q)] * work[(p, q)];
                }
            }
            if off == 0.0 || off.sqrt() <= 1e-300 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = work[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    // Entries negligible against both diagonal values are dropped.
                    let g = 100.0 * apq.abs();
                    if sweep > 3
                        && work[(p, p)].abs() + g == work[(p, p)].abs()
                        && work[(q, q)].abs() + g == work[(q, q)].abs()
                    {
                        work[(p, q)] = 0.0;
                        work[(q, p)] = 0.0;
                        continue;
                    }
                    rotate(&mut work, &mut v, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| work[(j, j)].total_cmp(&work[(i, i)]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&k| work[(k, k)]).collect();
    let mut vectors = Matrix::zeros(n);
    for (col, &k) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 0..n {
            if v[(i, k)].abs() > v[(pivot, k)].abs() {
                pivot = i;
            }
        }
        let sign = if v[(pivot, k)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, col)] = sign * v[(i, k)];
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Frobenius-nearest PSD matrix: negative eigenvalues are replaced by zero.
pub fn psd_project(a: &Matrix) -> Result<Matrix> {
    let eig = eigh(a)?;
    Ok(eig.reconstruct_with(|e| if e > 0.0 { e } else { 0.0 }))
}

/// True when the smallest eigenvalue is at least `-rel_tol * ||A||_2`.
pub fn is_psd(a: &Matrix, rel_tol: f64) -> Result<bool> {
    let eig = eigh(a)?;
    Ok(eig.min_value() >= -rel_tol * eig.spectral_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = StandardNormal.sample(&mut rng);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn identity_spectrum() {
        let e = eigh(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn swap_matrix_spectrum() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let e = eigh(&a).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-15);
        assert!((e.values[1] + 1.0).abs() < 1e-15);
        let u = e.vector(0);
        assert!((u[0] - u[1]).abs() < 1e-15 && u[0] > 0.0);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let a = random_symmetric(20, 42);
        let e = eigh(&a).unwrap();
        let resid = a.sub(&e.reconstruct()).frobenius_norm();
        assert!(resid <= 1e-8 * (1.0 + a.frobenius_norm()), "{resid}");
        let vtv = e.vectors.transpose().matmul(&e.vectors);
        assert!(vtv.sub(&Matrix::identity(20)).max_abs() < 1e-8);
        for k in 0..20 {
            let u = e.vector(k);
            let au = a.mul_vec(&u);
            for i in 0..20 {
                assert!((au[i] - e.values[k] * u[i]).abs() < 1e-9);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sign_convention() {
        let e = eigh(&random_symmetric(8, 3)).unwrap();
        for k in 0..8 {
            let u = e.vector(k);
            let pivot = u
                .iter()
                .cloned()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eigh(&a), Err(Error::NotSymmetric { .. })));
        assert!(psd_project(&a).is_err());
    }

    #[test]
    fn projection_examples() {
        let d = Matrix::from_diagonal(&[1.0, 2.0]);
        assert!(psd_project(&d).unwrap().sub(&d).max_abs() < 1e-15);

        let d = Matrix::from_diagonal(&[1.0, -2.0]);
        let p = psd_project(&d).unwrap();
        assert!(p.sub(&Matrix::from_diagonal(&[1.0, 0.0])).max_abs() < 1e-15);

        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = psd_project(&a).unwrap();
        let half = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(p.sub(&half).max_abs() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent_and_psd() {
        for seed in 0..5 {
            let a = random_symmetric(12, seed);
            let p = psd_project(&a).unwrap();
            let pp = psd_project(&p).unwrap();
            assert!(pp.sub(&p).max_abs() < 1e-10);
            let e = eigh(&p).unwrap();
            assert!(e.min_value() >= -1e-10 * e.spectral_norm());
            assert!(is_psd(&p, 1e-10).unwrap());
        }
        assert!(!is_psd(&Matrix::from_diagonal(&[1.0, -1.0]), 1e-10).unwrap());
    }

    #[test]
    fn zero_matrix() {
        let e = eigh(&Matrix::zeros(3)).unwrap();
        assert_eq!(e.values, vec![0.0; 3]);
        assert_eq!(psd_project(&Matrix::zeros(3)).unwrap(), Matrix::zeros(3));
    }

    #[test]
    fn block_diagonal_structure_survives_projection() {
        let mut a = Matrix::zeros(4);
        a[(0, 0)] = 1.0;
        a[(0, 1)] = 2.0;
        a[(1, 0)] = 2.0;
        a[(2, 3)] = -1.0;
        a[(3, 2)] = -1.0;
        let p = psd_project(&a).unwrap();
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(p[(i, j)], 0.0);
            }
        }
    }
}
