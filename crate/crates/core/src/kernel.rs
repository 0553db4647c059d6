//! Kernels, feature maps and normalized Gram matrices.
//!
//! Every kernel used by the experiments has an explicit finite-rank feature
//! map `phi`, so that `k(x, z) = phi(x) . phi(z)` and a model is a coefficient
//! vector `theta` with `f(x) = phi(x) . theta`. Kernels without a feature map
//! ([`KernelSpec::Implicit`]) can still be trained through the dual recursion.
//!
//! Points are passed as matrices with one point per row.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type FeatureFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type KernelFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// A user-supplied feature evaluation of fixed output dimension.
#[derive(Clone)]
pub struct FeatureMap {
    name: String,
    input_dim: usize,
    feature_dim: usize,
    map: Arc<FeatureFn>,
}

impl FeatureMap {
    /// `map(x, out)` must fill `out` (length `feature_dim`) with `phi(x)`.
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        feature_dim: usize,
        map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FeatureMap {
            name: name.into(),
            input_dim,
            feature_dim,
            map: Arc::new(map),
        }
    }
}

/// A kernel known only through its evaluation `k(x, z)`.
#[derive(Clone)]
pub struct ImplicitKernel {
    name: String,
    input_dim: usize,
    eval: Arc<KernelFn>,
}

impl ImplicitKernel {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ImplicitKernel {
            name: name.into(),
            input_dim,
            eval: Arc::new(eval),
        }
    }
}

#[derive(Clone)]
pub enum KernelSpec {
    /// `k(x, z) = x . z` on `dim`-dimensional inputs; `phi` is the identity.
    Linear {
        dim: usize,
    },
    /// `phi(x) = [1, x, ..., x^degree]` on scalar inputs.
    Monomial {
        degree: usize,
    },
    FiniteRank(FeatureMap),
    Implicit(ImplicitKernel),
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear { dim } => write!(f, "Linear {{ dim: {dim} }}"),
            KernelSpec::Monomial { degree } => write!(f, "Monomial {{ degree: {degree} }}"),
            KernelSpec::FiniteRank(m) => write!(
                f,
                "FiniteRank({:?}, {} -> {})",
                m.name, m.input_dim, m.feature_dim
            ),
            KernelSpec::Implicit(k) => write!(f, "Implicit({:?}, dim {})", k.name, k.input_dim),
        }
    }
}

impl KernelSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            KernelSpec::Linear { dim } => *dim,
            KernelSpec::Monomial { .. } => 1,
            KernelSpec::FiniteRank(m) => m.input_dim,
            KernelSpec::Implicit(k) => k.input_dim,
        }
    }

    /// Dimension of the feature map, if the kernel has one.
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Linear { dim } => Some(*dim),
            KernelSpec::Monomial { degree } => Some(degree + 1),
            KernelSpec::FiniteRank(m) => Some(m.feature_dim),
            KernelSpec::Implicit(_) => None,
        }
    }

    pub fn has_feature_map(&self) -> bool {
        self.feature_dim().is_some()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "kernel expects {}-dimensional inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Writes `phi(x)` into `out`.
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_point(x)?;
        let dim = self.feature_dim().ok_or_else(|| {
            Error::UnsupportedRepresentation(format!("{self:?} has no explicit feature map"))
        })?;
        if out.len() != dim {
            return Err(Error::shape(format!(
                "feature buffer has length {}, expected {dim}",
                out.len()
            )));
        }
        match self {
            KernelSpec::Linear { .. } => out.copy_from_slice(x),
            KernelSpec::Monomial { .. } => {
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= x[0];
                }
            }
            KernelSpec::FiniteRank(m) => (m.map)(x, out),
            KernelSpec::Implicit(_) => unreachable!("feature_dim() is None for implicit kernels"),
        }
        Ok(())
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.feature_dim().unwrap_or(0)];
        self.features_into(x, &mut out)?;
        Ok(out)
    }
}

/// Evaluates `k(x, z)`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], z: &[f64]) -> Result<f64> {
    spec.check_point(x)?;
    spec.check_point(z)?;
    Ok(match spec {
        KernelSpec::Linear { .. } => x.iter().zip(z).map(|(a, b)| a * b).sum(),
        KernelSpec::Monomial { degree } => {
            // sum_{i=0}^{p} (xz)^i by Horner.
            let u = x[0] * z[0];
            (0..*degree).fold(1.0, |acc, _| acc * u + 1.0)
        }
        KernelSpec::FiniteRank(m) => {
            let mut fx = vec![0.0; m.feature_dim];
            let mut fz = vec![0.0; m.feature_dim];
            (m.map)(x, &mut fx);
            (m.map)(z, &mut fz);
            fx.iter().zip(&fz).map(|(a, b)| a * b).sum()
        }
        KernelSpec::Implicit(k) => (k.eval)(x, z),
    })
}

/// Gram matrix together with the normalization constant it was divided by.
///
/// Local blocks are normalized by `n_i` and the global matrix by `N`; the
/// constant travels with the matrix so the two are never confused.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    raw: DMatrix<f64>,
    normalization: usize,
}

impl GramMatrix {
    /// `(K)_{jl} = k(x_j, x_l) / n`.
    pub fn normalized(&self) -> DMatrix<f64> {
        &self.raw / self.normalization as f64
    }

    /// `k(x_j, x_l)` without normalization.
    pub fn unnormalized(&self) -> &DMatrix<f64> {
        &self.raw
    }

    pub fn normalization(&self) -> usize {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }
}

/// Unnormalized Gram matrix `k(x_j, x_l)` over the rows of `points`.
pub fn unnormalized_gram(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("gram matrix of an empty point set"));
    }
    if points.ncols() != spec.input_dim() {
        return Err(Error::shape(format!(
            "points have {} columns, kernel expects {}",
            points.ncols(),
            spec.input_dim()
        )));
    }
    if spec.has_feature_map() {
        let phi = feature_matrix(spec, points)?;
        let mut raw = &phi * phi.transpose();
        // Exact symmetry, regardless of the summation order in the product.
        for j in 0..n {
            for l in (j + 1)..n {
                raw[(l, j)] = raw[(j, l)];
            }
        }
        return Ok(raw);
    }
    let rows: Vec<Vec<f64>> = points.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut raw = DMatrix::zeros(n, n);
    for j in 0..n {
        for l in j..n {
            let v = eval_kernel(spec, &rows[j], &rows[l])?;
            raw[(j, l)] = v;
            raw[(l, j)] = v;
        }
    }
    Ok(raw)
}

/// Normalized Gram matrix `(K)_{jl} = k(x_j, x_l) / n`.
pub fn gram(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<GramMatrix> {
    let raw = unnormalized_gram(spec, points)?;
    Ok(GramMatrix {
        normalization: raw.nrows(),
        raw,
    })
}

/// The `n x d` matrix whose row `j` is `phi(x_j)`.
pub fn feature_matrix(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = spec
        .feature_dim()
        .ok_or_else(|| Error::UnsupportedRepresentation(format!("{spec:?} has no explicit feature map")))?;
    if points.ncols() != spec.input_dim() {
        return Err(Error::shape(format!(
            "points have {} columns, kernel expects {}",
            points.ncols(),
            spec.input_dim()
        )));
    }
    if let KernelSpec::Linear { .. } = spec {
        return Ok(points.clone());
    }
    let n = points.nrows();
    let mut phi = DMatrix::zeros(n, d);
    let mut x = vec![0.0; spec.input_dim()];
    let mut row = vec![0.0; d];
    for j in 0..n {
        for (c, v) in x.iter_mut().enumerate() {
            *v = points[(j, c)];
        }
        spec.features_into(&x, &mut row)?;
        for (c, v) in row.iter().enumerate() {
            phi[(j, c)] = *v;
        }
    }
    Ok(phi)
}

/// `||f||_H` of a finite-rank function, i.e. the Euclidean norm of its
/// coefficients.
pub fn rkhs_norm(theta: &DVector<f64>) -> f64 {
    theta.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pts(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn eval_examples() {
        let lin = KernelSpec::Linear { dim: 2 };
        assert_eq!(eval_kernel(&lin, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let m5 = KernelSpec::Monomial { degree: 5 };
        assert_eq!(eval_kernel(&m5, &[1.0], &[1.0]).unwrap(), 6.0);
        let m2 = KernelSpec::Monomial { degree: 2 };
        assert_eq!(eval_kernel(&m2, &[2.0], &[0.5]).unwrap(), 3.0);
    }

    #[test]
    fn eval_rejects_wrong_dimension() {
        let lin = KernelSpec::Linear { dim: 2 };
        assert!(matches!(
            eval_kernel(&lin, &[1.0], &[1.0, 2.0]),
            Err(Error::InputShape(_))
        ));
    }

    #[test]
    fn gram_examples() {
        let lin = KernelSpec::Linear { dim: 2 };
        let g = gram(&lin, &pts(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(g.normalized(), DMatrix::identity(2, 2) * 0.5);
        assert_eq!(g.normalization(), 2);

        let lin1 = KernelSpec::Linear { dim: 1 };
        let g = gram(&lin1, &pts(1, 1, &[2.0])).unwrap();
        assert_eq!(g.normalized(), pts(1, 1, &[4.0]));

        let m1 = KernelSpec::Monomial { degree: 1 };
        let g = gram(&m1, &pts(2, 1, &[1.0, 2.0])).unwrap();
        assert_eq!(g.normalized(), pts(2, 2, &[2.0, 3.0, 3.0, 5.0]) * 0.5);
    }

    #[test]
    fn gram_of_nothing_is_an_error() {
        let lin = KernelSpec::Linear { dim: 2 };
        assert!(matches!(
            gram(&lin, &DMatrix::zeros(0, 2)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn feature_examples() {
        let m2 = KernelSpec::Monomial { degree: 2 };
        assert_eq!(
            feature_matrix(&m2, &pts(1, 1, &[3.0])).unwrap(),
            pts(1, 3, &[1.0, 3.0, 9.0])
        );
        let lin = KernelSpec::Linear { dim: 2 };
        assert_eq!(
            feature_matrix(&lin, &pts(1, 2, &[1.0, 2.0])).unwrap(),
            pts(1, 2, &[1.0, 2.0])
        );
        let m5 = KernelSpec::Monomial { degree: 5 };
        assert_eq!(
            feature_matrix(&m5, &pts(1, 1, &[0.0])).unwrap(),
            pts(1, 6, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        );
    }

    #[test]
    fn implicit_kernel_has_no_features() {
        let k = KernelSpec::Implicit(ImplicitKernel::new("shifted", 1, |x, z| 1.0 + x[0] * z[0]));
        assert!(matches!(
            feature_matrix(&k, &pts(1, 1, &[1.0])),
            Err(Error::UnsupportedRepresentation(_))
        ));
        let g = gram(&k, &pts(2, 1, &[1.0, 2.0])).unwrap();
        assert_eq!(g.unnormalized(), &pts(2, 2, &[2.0, 3.0, 3.0, 5.0]));
    }

    #[test]
    fn rkhs_norm_examples() {
        assert_eq!(rkhs_norm(&DVector::from_vec(vec![3.0, 4.0])), 5.0);
        assert_eq!(rkhs_norm(&DVector::zeros(3)), 0.0);
        assert_eq!(rkhs_norm(&DVector::from_element(4, 1.0)), 2.0);
    }

    fn specs() -> Vec<KernelSpec> {
        vec![
            KernelSpec::Linear { dim: 3 },
            KernelSpec::Monomial { degree: 5 },
            KernelSpec::FiniteRank(FeatureMap::new("trig", 1, 3, |x, out| {
                out[0] = 1.0;
                out[1] = x[0].sin();
                out[2] = x[0].cos();
            })),
        ]
    }

    proptest! {
        #[test]
        fn mercer_consistency(seed in prop::collection::vec(-1.5_f64..1.5, 6)) {
            for spec in specs() {
                let p = spec.input_dim();
                let x = &seed[..p];
                let z = &seed[3..3 + p];
                let k = eval_kernel(&spec, x, z).unwrap();
                let fx = spec.features(x).unwrap();
                let fz = spec.features(z).unwrap();
                let dot: f64 = fx.iter().zip(&fz).map(|(a, b)| a * b).sum();
                prop_assert!((k - dot).abs() <= 1e-10 * (1.0 + k.abs()));
                prop_assert_eq!(k, eval_kernel(&spec, z, x).unwrap());
            }
        }

        #[test]
        fn gram_is_psd_and_normalized(n in 1_usize..50, data in prop::collection::vec(-1.0_f64..1.0, 150)) {
            for spec in specs() {
                let p = spec.input_dim();
                let points = DMatrix::from_fn(n, p, |r, c| data[(r * p + c) % data.len()]);
                let g = gram(&spec, &points).unwrap();
                let raw = unnormalized_gram(&spec, &points).unwrap();
                prop_assert_eq!(g.unnormalized(), &raw);
                let norm = g.normalized();
                let rescaled = &norm * n as f64;
                assert_relative_eq!(rescaled, raw.clone(), max_relative = 1e-14, epsilon = 1e-14);
                prop_assert_eq!(norm.transpose(), norm.clone());
                let eig = crate::linalg::sym_eigenvalues(&raw).unwrap();
                prop_assert!(*eig.last().unwrap() >= -1e-8);
            }
        }
    }
}
