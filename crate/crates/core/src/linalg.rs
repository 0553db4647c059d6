//! Small dense linear-algebra helpers shared by the engine and the spectral
//! analysis. Everything here works on symmetric matrices unless noted.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_MAX_ITER: usize = 10_000;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: DMatrix<f64>,
}

impl SortedEigen {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape(format!(
                "eigendecomposition needs a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        if n == 0 {
            return Ok(SortedEigen {
                values: DVector::zeros(0),
                vectors: DMatrix::zeros(0, 0),
            });
        }
        let sym = symmetrize(m);
        // Exactly zero rows (unobserved coordinates) are split off: they are
        // eigenvectors for 0, and the QR iteration can return non-finite
        // values on matrices with large zero blocks.
        let active: Vec<usize> = (0..n).filter(|&i| sym.row(i).iter().any(|&v| v != 0.0)).collect();
        let k = active.len();
        let reduced = DMatrix::from_fn(k, k, |r, c| sym[(active[r], active[c])]);
        let (mut vals, mut vecs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        if k > 0 {
            let eig = SymmetricEigen::try_new(reduced, f64::EPSILON, EIGEN_MAX_ITER)
                .filter(|e| e.eigenvalues.iter().all(|v| v.is_finite()))
                .ok_or_else(|| {
                    let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                    Error::Numeric(format!(
                        "symmetric eigensolve did not converge (n = {n}, max |entry| = {scale:e})"
                    ))
                })?;
            for j in 0..k {
                let mut v = DVector::zeros(n);
                for (r, &i) in active.iter().enumerate() {
                    v[i] = eig.eigenvectors[(r, j)];
                }
                vals.push(eig.eigenvalues[j]);
                vecs.push(v);
            }
        }
        for i in (0..n).filter(|i| active.binary_search(i).is_err()) {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            vals.push(0.0);
            vecs.push(v);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&k| vals[k]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &vecs[src]);
        }
        Ok(SortedEigen { values, vectors })
    }

    /// `U diag(f(values)) U^T`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[k]);
        }
        &scaled * self.vectors.transpose()
    }

    pub fn max(&self) -> f64 {
        self.values.get(0).copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().next_back().copied().unwrap_or(0.0)
    }
}

/// Averages a matrix with its transpose to remove round-off asymmetry.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Descending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(SortedEigen::new(m)?.values.iter().copied().collect())
}

/// Spectral norm of a symmetric positive semidefinite matrix.
pub fn psd_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(SortedEigen::new(m)?.max().max(0.0))
}

/// `m^k` by repeated squaring.
pub fn mat_pow(m: &DMatrix<f64>, mut k: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Returns `(A^k, I + A + ... + A^(k-1))` using doubling, so an affine
/// recursion `x <- A x + b` run for `k` steps from `x0` ends at
/// `A^k x0 + S_k b`.
pub fn affine_power(a: &DMatrix<f64>, k: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    // (P, S) represent j steps: P = A^j, S = sum_{i<j} A^i.
    let mut acc_p = DMatrix::identity(n, n);
    let mut acc_s = DMatrix::zeros(n, n);
    let mut base_p = a.clone();
    let mut base_s = DMatrix::identity(n, n);
    let mut remaining = k;
    while remaining > 0 {
        if remaining & 1 == 1 {
            // Compose acc (j steps) followed by base (m steps):
            // S = S_base + P_base * S_acc, P = P_base * P_acc.
            acc_s = &base_s + &base_p * &acc_s;
            acc_p = &base_p * &acc_p;
        }
        remaining >>= 1;
        if remaining > 0 {
            base_s = &base_s + &base_p * &base_s;
            base_p = &base_p * &base_p;
        }
    }
    (acc_p, acc_s)
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn spd_solve(m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(m).ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))?;
    Ok(chol.solve(rhs))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(m).ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))?;
    Ok(chol.inverse())
}

/// `sum_{tau < s} L^tau` together with `L^s`.
pub fn geometric_sum(l: &DMatrix<f64>, s: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    affine_power(l, s as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigenvalues_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, -1.0]);
        let e = SortedEigen::new(&m).unwrap();
        assert_eq!(e.values.as_slice(), &[5.0, 2.0, -1.0]);
        let back = e.apply(|v| v);
        assert_relative_eq!(back, m, epsilon = 1e-12);
    }

    #[test]
    fn affine_power_matches_iteration() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let b = DVector::from_vec(vec![1.0, -2.0]);
        let x0 = DVector::from_vec(vec![0.3, 0.7]);
        for k in [0_u64, 1, 2, 7, 16, 33] {
            let mut x = x0.clone();
            for _ in 0..k {
                x = &a * &x + &b;
            }
            let (p, s) = affine_power(&a, k);
            let y = &p * &x0 + &s * &b;
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn mat_pow_small_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(mat_pow(&a, 0), DMatrix::identity(2, 2));
        assert_eq!(
            mat_pow(&a, 5),
            DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 0.0, 1.0])
        );
    }

    #[test]
    fn zero_blocks_are_deflated() {
        // Rank-10 rows in 100 coordinates: 90 exactly zero rows and columns.
        let spec = crate::datagen::ScenarioSpec {
            seed: crate::datagen::split_seed(0, 0),
            ..crate::datagen::ScenarioSpec::subspace(10, 0)
        };
        let ds = crate::datagen::generate(&spec).unwrap();
        for c in ds.clients() {
            let phi = c.features().unwrap();
            let g = phi.tr_mul(phi) / c.len() as f64;
            let e = SortedEigen::new(&g).unwrap();
            assert!(e.values.iter().all(|v| v.is_finite()));
            assert_eq!(e.values.iter().filter(|&&v| v.abs() > 1e-9).count(), 10);
            assert_relative_eq!(e.apply(|v| v), g, epsilon = 1e-9);
        }
    }
}
