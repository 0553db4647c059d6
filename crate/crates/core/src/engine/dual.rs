//! Closed-form prediction recursion over all training points.
//!
//! Local blocks `P_ii` are built from the client Gram matrices normalized by
//! `n_i`; the global `K_x` is normalized by `N`. Local blocks are never cut out
//! of the global matrix.

use nalgebra::{DMatrix, DVector};

use super::{Algorithm, AlgorithmConfig};
use crate::dataset::FederatedDataset;
use crate::error::{Error, Result};
use crate::kernel::{self, GramMatrix, KernelSpec};
use crate::linalg;

/// `P` (block diagonal), `K_x` and the in-sample initial predictions.
#[derive(Debug, Clone)]
pub struct DualOperator {
    /// `P_ii` per client.
    pub blocks: Vec<DMatrix<f64>>,
    /// Global Gram over the stacked covariates, normalized by `N`.
    pub kx: GramMatrix,
    /// `f_0(x)` over the stacked covariates.
    pub f0_x: DVector<f64>,
    pub offsets: Vec<usize>,
}

impl DualOperator {
    pub fn total(&self) -> usize {
        self.kx.len()
    }

    /// Dense `P`.
    pub fn p(&self) -> DMatrix<f64> {
        let n = self.total();
        let mut p = DMatrix::zeros(n, n);
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            p.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        }
        p
    }

    /// `P^T v`, block by block.
    pub fn p_transpose_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            let n = b.nrows();
            out.rows_mut(o, n).gemv_tr(1.0, b, &v.rows(o, n), 0.0);
        }
        out
    }

    /// In-sample predictions `f(x) = f_0(x) + N K_x alpha`.
    pub fn predictions(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let mut f = self.f0_x.clone();
        f.gemv(1.0, self.kx.unnormalized(), alpha, 1.0);
        f
    }
}

/// Normalized local Gram matrices `K_{x_i}` (divided by `n_i`).
pub fn local_grams(ds: &FederatedDataset) -> Result<Vec<DMatrix<f64>>> {
    ds.clients()
        .iter()
        .map(|c| Ok(kernel::gram(ds.kernel(), c.covariates())?.normalized()))
        .collect()
}

/// `P_ii` for one client from its normalized local Gram.
pub fn p_block(k_local: &DMatrix<f64>, algorithm: Algorithm, eta: f64) -> Result<DMatrix<f64>> {
    let n = k_local.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    match algorithm {
        Algorithm::FedAvg { local_steps } => {
            let l = &eye - k_local * eta;
            Ok(linalg::geometric_sum(&l, local_steps).1)
        }
        Algorithm::FedProx => linalg::spd_inverse(&eye + k_local * eta),
    }
}

/// Builds `P` and `K_x`. FedAvg requires `eta ||K_{x_i}|| < 1` for every client.
pub fn build_dual_operator(ds: &FederatedDataset, config: &AlgorithmConfig) -> Result<DualOperator> {
    config.validate()?;
    let grams = local_grams(ds)?;
    let mut blocks = Vec::with_capacity(grams.len());
    for (i, k) in grams.iter().enumerate() {
        if let Algorithm::FedAvg { .. } = config.algorithm {
            let gamma = config.eta * linalg::psd_norm(k)?;
            if gamma >= 1.0 {
                return Err(Error::Stability { client: i, gamma });
            }
        }
        blocks.push(p_block(k, config.algorithm, config.eta)?);
    }
    let kx = kernel::gram(ds.kernel(), &ds.stacked_covariates())?;
    let f0_x = match &config.init {
        Some(theta0) => {
            let phi = ds.stacked_features()?;
            if phi.ncols() != theta0.len() {
                return Err(Error::shape("initial model does not match the feature dimension"));
            }
            phi * theta0
        }
        None => DVector::zeros(ds.total()),
    };
    Ok(DualOperator {
        blocks,
        kx,
        f0_x,
        offsets: ds.offsets(),
    })
}

/// `alpha + (eta / N) P^T (y - f(x))`.
pub fn run_round_dual(
    alpha: &DVector<f64>,
    ds: &FederatedDataset,
    op: &DualOperator,
    eta: f64,
) -> Result<DVector<f64>> {
    let n = op.total();
    if alpha.len() != n || ds.total() != n {
        return Err(Error::shape(format!(
            "dual weights of length {}, operator over {n} points, dataset with {}",
            alpha.len(),
            ds.total()
        )));
    }
    let resid = ds.stacked_responses() - op.predictions(alpha);
    let mut out = op.p_transpose_mul(&resid);
    out *= eta / n as f64;
    out += alpha;
    Ok(out)
}

/// A dual model evaluable at arbitrary points.
#[derive(Debug, Clone)]
pub struct DualModel {
    pub kernel: KernelSpec,
    /// Training covariates, one per row.
    pub points: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// Coefficients of `f_0`; zero function when absent.
    pub f0: Option<DVector<f64>>,
}

impl DualModel {
    /// `f(z) = f_0(z) + sum_j alpha_j k(z, x_j)` for each row `z` of `queries`.
    pub fn predict(&self, queries: &DMatrix<f64>) -> Result<DVector<f64>> {
        let p = self.kernel.input_dim();
        if queries.ncols() != p {
            return Err(Error::shape(format!(
                "queries have {} columns, kernel expects {p}",
                queries.ncols()
            )));
        }
        let xs: Vec<Vec<f64>> = self
            .points
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        let mut out = DVector::zeros(queries.nrows());
        for (q, row) in queries.row_iter().enumerate() {
            let z: Vec<f64> = row.iter().copied().collect();
            let mut acc = match &self.f0 {
                Some(t) => self
                    .kernel
                    .features(&z)?
                    .iter()
                    .zip(t.iter())
                    .map(|(a, b)| a * b)
                    .sum(),
                None => 0.0,
            };
            for (x, a) in xs.iter().zip(self.alpha.iter()) {
                acc += a * kernel::eval_kernel(&self.kernel, &z, x)?;
            }
            out[q] = acc;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClientData;
    use approx::assert_relative_eq;

    fn orthonormal_client() -> FederatedDataset {
        let c = ClientData::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, -1.0]));
        FederatedDataset::new(KernelSpec::Linear { dim: 2 }, vec![c], 0.0).unwrap()
    }

    #[test]
    fn p_examples() {
        let ds = orthonormal_client();
        let op = build_dual_operator(&ds, &AlgorithmConfig::fedavg(1, 1.0, 1)).unwrap();
        assert_eq!(op.p(), DMatrix::identity(2, 2));
        let op = build_dual_operator(&ds, &AlgorithmConfig::fedprox(1.0, 1)).unwrap();
        assert_relative_eq!(op.p(), DMatrix::identity(2, 2) * (2.0 / 3.0), epsilon = 1e-15);
        let op = build_dual_operator(&ds, &AlgorithmConfig::fedavg(2, 1.0, 1)).unwrap();
        assert_relative_eq!(op.p(), DMatrix::identity(2, 2) * 1.5, epsilon = 1e-15);
    }

    #[test]
    fn unstable_client_is_named() {
        let a = ClientData::new(DMatrix::from_element(1, 1, 0.1), DVector::from_element(1, 0.0));
        let b = ClientData::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, 0.0));
        let ds = FederatedDataset::new(KernelSpec::Linear { dim: 1 }, vec![a, b], 0.0).unwrap();
        match build_dual_operator(&ds, &AlgorithmConfig::fedavg(2, 0.5, 1)) {
            Err(Error::Stability { client, gamma }) => {
                assert_eq!(client, 1);
                assert_relative_eq!(gamma, 2.0);
            }
            other => panic!("expected a stability error, got {other:?}"),
        }
        assert!(build_dual_operator(&ds, &AlgorithmConfig::fedprox(0.5, 1)).is_ok());
    }

    #[test]
    fn dual_round_examples() {
        let c = ClientData::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0));
        let ds = FederatedDataset::new(KernelSpec::Linear { dim: 1 }, vec![c], 0.0).unwrap();
        let cfg = AlgorithmConfig::fedavg(1, 0.5, 1);
        let op = build_dual_operator(&ds, &cfg).unwrap();
        let a = run_round_dual(&DVector::zeros(1), &ds, &op, 0.5).unwrap();
        assert_relative_eq!(a[0], 1.0);
        assert_relative_eq!(op.predictions(&a)[0], 1.0);

        // Zero residual leaves alpha alone.
        let c = ClientData::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0));
        let ds = FederatedDataset::new(KernelSpec::Linear { dim: 1 }, vec![c], 0.0).unwrap();
        let op = build_dual_operator(&ds, &cfg).unwrap();
        let a0 = DVector::zeros(1);
        assert_eq!(run_round_dual(&a0, &ds, &op, 0.5).unwrap(), a0);
    }

    #[test]
    fn dual_model_predicts_out_of_sample() {
        let model = DualModel {
            kernel: KernelSpec::Monomial { degree: 1 },
            points: DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            alpha: DVector::from_vec(vec![0.5, -0.25]),
            f0: Some(DVector::from_vec(vec![1.0, 0.0])),
        };
        // 1 + 0.5 (1 + 3) - 0.25 (1 + 6)
        let f = model.predict(&DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_relative_eq!(f[0], 1.0 + 2.0 - 1.75, epsilon = 1e-15);
    }
}
