//! A full-batch round as an affine map in coefficient space.
//!
//! With `G_i = Phi_i^T Phi_i / n_i` and `L_i = I - eta G_i`, FedAvg's local
//! update is `theta -> L_i^s theta + eta Q_i Phi_i^T y_i / n_i` with
//! `Q_i = sum_{tau<s} L_i^tau`; FedProx's is
//! `theta -> (I + eta G_i)^{-1} (theta + eta Phi_i^T y_i / n_i)`.
//! Averaging gives `theta -> A theta + Psi y`, where `Psi` is `d x N`.

use nalgebra::{DMatrix, DVector};

use super::{Algorithm, AlgorithmConfig};
use crate::dataset::FederatedDataset;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct AffineRound {
    /// `A = sum_i w_i A_i`.
    pub a: DMatrix<f64>,
    /// `Psi = [w_1 Psi_1, ..., w_M Psi_M]`; the round offset is `Psi y`.
    pub psi: DMatrix<f64>,
    /// `eta ||G_i||` per client.
    pub client_gammas: Vec<f64>,
    pub eta: f64,
    pub algorithm: Algorithm,
}

impl AffineRound {
    /// Compiles a full-batch round. FedAvg requires `eta ||G_i|| < 1`.
    pub fn compile(ds: &FederatedDataset, config: &AlgorithmConfig) -> Result<Self> {
        config.validate_for(ds)?;
        if !config.is_full_batch(ds) {
            return Err(Error::config("affine compilation needs full-batch rounds"));
        }
        let d = ds.feature_dim().ok_or_else(|| {
            Error::UnsupportedRepresentation("affine compilation needs a feature map".into())
        })?;
        let eta = config.eta;
        let eye = DMatrix::<f64>::identity(d, d);
        let mut a = DMatrix::zeros(d, d);
        let mut psi = DMatrix::zeros(d, ds.total());
        let mut client_gammas = Vec::with_capacity(ds.num_clients());
        let weights = ds.weights();
        for (i, (c, (&w, &off))) in ds
            .clients()
            .iter()
            .zip(weights.iter().zip(&ds.offsets()))
            .enumerate()
        {
            let phi = c.features()?;
            let n = c.len() as f64;
            let g = phi.tr_mul(phi) / n;
            let gamma = eta * linalg::psd_norm(&g)?;
            client_gammas.push(gamma);
            let (a_i, gain) = match config.algorithm {
                Algorithm::FedAvg { local_steps } => {
                    if gamma >= 1.0 {
                        return Err(Error::Stability { client: i, gamma });
                    }
                    linalg::affine_power(&(&eye - &g * eta), local_steps as u64)
                }
                Algorithm::FedProx => {
                    let inv = linalg::spd_inverse(&eye + &g * eta)?;
                    (inv.clone(), inv)
                }
            };
            a += a_i * w;
            // Psi_i = (eta / n_i) gain Phi_i^T, scaled by w_i = n_i / N.
            let block = (gain * phi.transpose()) * (w * eta / n);
            psi.columns_mut(off, c.len()).copy_from(&block);
        }
        Ok(AffineRound {
            a: linalg::symmetrize(&a),
            psi,
            client_gammas,
            eta,
            algorithm: config.algorithm,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `max_i eta ||G_i||`, which equals `eta max_i ||K_{x_i}||`.
    pub fn gamma(&self) -> f64 {
        self.client_gammas.iter().copied().fold(0.0, f64::max)
    }

    /// Round offset `b = Psi y` for stacked responses `y`.
    pub fn offset(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.psi.ncols() {
            return Err(Error::shape(format!(
                "{} responses for an operator over {} points",
                y.len(),
                self.psi.ncols()
            )));
        }
        Ok(&self.psi * y)
    }

    pub fn step(&self, theta: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        out.gemv(1.0, &self.a, theta, 1.0);
        out
    }

    /// `(I - A) / eta`; its eigenvalues are the nonzero eigenvalues of `K_x P`.
    pub fn spectral_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        (DMatrix::identity(d, d) - &self.a) / self.eta
    }

    /// Runs `k` rounds at once: `A^k theta + S_k b`.
    pub fn advance(&self, theta: &DVector<f64>, b: &DVector<f64>, k: u64) -> DVector<f64> {
        let (p, s) = linalg::affine_power(&self.a, k);
        p * theta + s * b
    }

    /// Fixed point `(I - A)^{-1} b`, solved through the symmetric system
    /// `eta^{-1}(I - A)`.
    pub fn fixed_point(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.spectral_matrix();
        let eig = linalg::SortedEigen::new(&m)?;
        let (hi, lo) = (eig.max(), eig.min());
        if !(lo > 0.0) || hi / lo > 1e12 {
            return Err(Error::Degenerate(format!(
                "I - A is numerically singular (eigenvalues in [{lo:e}, {hi:e}] after scaling); \
                 some feature direction is not observed by any client"
            )));
        }
        Ok(eig.apply(|v| 1.0 / v) * b / self.eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClientData;
    use crate::engine::primal::PrimalSimulator;
    use crate::kernel::KernelSpec;
    use approx::assert_relative_eq;

    fn small() -> FederatedDataset {
        let mk = |n: usize, off: f64| {
            let x = DMatrix::from_fn(n, 3, |r, c| (((r * 3 + c) as f64).powi(2) * 0.37 + off).sin());
            let y = DVector::from_fn(n, |r, _| (r as f64 + off).cos());
            ClientData::new(x, y)
        };
        FederatedDataset::new(
            KernelSpec::Linear { dim: 3 },
            vec![mk(4, 0.0), mk(2, 1.0), mk(5, 2.0)],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn compiled_round_matches_simulation() {
        let ds = small();
        for cfg in [
            AlgorithmConfig::fedavg(1, 0.3, 7),
            AlgorithmConfig::fedavg(5, 0.3, 7),
            AlgorithmConfig::fedprox(0.3, 7),
        ] {
            let op = AffineRound::compile(&ds, &cfg).unwrap();
            let b = op.offset(&ds.stacked_responses()).unwrap();
            let mut sim = PrimalSimulator::new(&ds, &cfg, 0).unwrap();
            let mut theta = DVector::zeros(3);
            for _ in 0..7 {
                sim.step(&ds).unwrap();
                theta = op.step(&theta, &b);
                assert_relative_eq!(theta, sim.theta().clone(), epsilon = 1e-12);
            }
            let jump = op.advance(&DVector::zeros(3), &b, 7);
            assert_relative_eq!(jump, theta, epsilon = 1e-12);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let ds = small();
        let op = AffineRound::compile(&ds, &AlgorithmConfig::fedavg(3, 0.2, 1)).unwrap();
        let b = op.offset(&ds.stacked_responses()).unwrap();
        let tb = op.fixed_point(&b).unwrap();
        assert_relative_eq!(op.step(&tb, &b), tb, epsilon = 1e-10);
    }
}
