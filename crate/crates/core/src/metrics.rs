//! Measured quantities: gradient norms, errors, local baselines, federation
//! gain, Monte-Carlo MSE and empirical exceedance probabilities.

use std::f64::consts::E;

use nalgebra::{DMatrix, DVector, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, Noise};
use crate::dataset::FederatedDataset;
use crate::engine::{AffineRound, AlgorithmConfig};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg;
use crate::spectral;

/// Default Monte-Carlo sample count for [`mse_monte_carlo`].
pub const MC_SAMPLES: usize = 100_000;

/// Offset applied to the run seed for Monte-Carlo integration draws.
pub const MC_SEED_STRIDE: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// `||(2/N) sum_i X_i^T (X_i theta - y_i)||`, the gradient of
/// `(1/N) sum_i ||y_i - X_i theta||^2`.
pub fn global_gradient_norm(theta: &DVector<f64>, ds: &FederatedDataset) -> Result<f64> {
    let mut g = DVector::zeros(theta.len());
    for c in ds.clients() {
        let phi = c.features()?;
        if phi.ncols() != theta.len() {
            return Err(Error::shape("model length does not match the features"));
        }
        let mut r = c.responses().clone();
        r.gemv(1.0, phi, theta, -1.0);
        g.gemv_tr(1.0, phi, &r, 1.0);
    }
    Ok(g.norm() * 2.0 / ds.total() as f64)
}

/// Precomputed `G = Phi^T Phi / N` and `c = Phi^T y / N`, so the gradient
/// norm `2 ||G theta - c||` costs `O(d^2)` per evaluation.
#[derive(Debug, Clone)]
pub struct GradientOracle {
    pub g: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl GradientOracle {
    pub fn new(ds: &FederatedDataset) -> Result<Self> {
        let phi = ds.stacked_features()?;
        let n = ds.total() as f64;
        Ok(GradientOracle {
            g: phi.tr_mul(&phi) / n,
            c: phi.tr_mul(&ds.stacked_responses()) / n,
        })
    }

    /// Same covariates, new responses.
    pub fn with_responses(&self, ds: &FederatedDataset) -> Result<Self> {
        let phi = ds.stacked_features()?;
        Ok(GradientOracle {
            g: self.g.clone(),
            c: phi.tr_mul(&ds.stacked_responses()) / ds.total() as f64,
        })
    }

    pub fn norm(&self, theta: &DVector<f64>) -> f64 {
        let mut r = self.c.clone();
        r.gemv(1.0, &self.g, theta, -1.0);
        2.0 * r.norm()
    }
}

/// `||theta - theta_ref||`.
pub fn estimation_error(theta: &DVector<f64>, theta_ref: &DVector<f64>) -> Result<f64> {
    if theta.len() != theta_ref.len() {
        return Err(Error::shape(format!(
            "models of length {} and {}",
            theta.len(),
            theta_ref.len()
        )));
    }
    Ok((theta - theta_ref).norm())
}

/// `(1/N) ||f_t(x) - f(x)||^2`.
pub fn empirical_prediction_error(pred: &DVector<f64>, reference: &DVector<f64>) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::shape(format!(
            "{} predictions against {} reference values",
            pred.len(),
            reference.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("prediction error over no points"));
    }
    Ok((pred - reference).norm_squared() / pred.len() as f64)
}

/// `(X^T X)^+ X^T y`, dropping singular values below `1e-10 sigma_max`.
pub fn min_norm_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    MinNormSolver::new(x)?.solve(y)
}

/// [`min_norm_least_squares`] with the SVD factored once, for repeated
/// solves on the same covariates.
#[derive(Debug, Clone)]
pub struct MinNormSolver {
    svd: Option<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    /// Columns with a nonzero entry; the others are in the null space and
    /// get coefficient zero.
    active: Vec<usize>,
    cutoff: f64,
    rows: usize,
    cols: usize,
}

impl MinNormSolver {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let active: Vec<usize> = (0..x.ncols())
            .filter(|&c| x.column(c).iter().any(|&v| v != 0.0))
            .collect();
        let (svd, cutoff) = if active.is_empty() {
            (None, 0.0)
        } else {
            // Dropping zero columns also sidesteps non-finite output from the
            // bidiagonalization on matrices with large zero blocks.
            let reduced = x.select_columns(&active);
            let svd = SVD::try_new(reduced, true, true, f64::EPSILON, 10_000)
                .filter(|s| s.singular_values.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
            let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
            (Some(svd), 1e-10 * smax)
        };
        Ok(MinNormSolver {
            svd,
            active,
            cutoff,
            rows: x.nrows(),
            cols: x.ncols(),
        })
    }

    pub fn solve(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "{} rows but {} responses",
                self.rows,
                y.len()
            )));
        }
        let mut out = DVector::zeros(self.cols);
        let Some(svd) = self.svd.as_ref().filter(|_| self.cutoff > 0.0) else {
            return Ok(out);
        };
        let part = svd
            .solve(y, self.cutoff)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        for (k, &c) in self.active.iter().enumerate() {
            out[c] = part[k];
        }
        Ok(out)
    }
}

/// How the federation gain combines the averaged errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GainScale {
    /// `mean ||loc err||^2 / mean ||fed err||^2`.
    Squared,
    /// Square root of the squared ratio: a ratio of RMS errors.
    #[default]
    Norm,
}

/// Running sums for an empirical federation gain.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GainAccumulator {
    local_sq: f64,
    fed_sq: f64,
    count: usize,
}

impl GainAccumulator {
    pub fn add(&mut self, local_err_sq: f64, fed_err_sq: f64) {
        self.local_sq += local_err_sq;
        self.fed_sq += fed_err_sq;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn gain(&self, scale: GainScale) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyInput("federation gain over zero trials"));
        }
        if !(self.fed_sq > 0.0) {
            return Err(Error::Degenerate(
                "federated error is zero; the gain is undefined".into(),
            ));
        }
        let r = self.local_sq / self.fed_sq;
        Ok(match scale {
            GainScale::Squared => r,
            GainScale::Norm => r.sqrt(),
        })
    }
}

/// Empirical federation gain of client `j`: local minimum-norm least squares
/// against the federated model after `config.max_rounds` full-batch rounds
/// (or the early-stopping time), averaged over `trials` fresh scenarios drawn
/// from split seeds.
pub fn federation_gain_empirical(
    spec: &datagen::ScenarioSpec,
    config: &AlgorithmConfig,
    client: usize,
    trials: usize,
    scale: GainScale,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::config("federation gain needs at least one trial"));
    }
    if client >= spec.clients() {
        return Err(Error::config(format!(
            "client {client} out of range for {} clients",
            spec.clients()
        )));
    }
    let mut acc = GainAccumulator::default();
    for k in 0..trials {
        let trial = datagen::ScenarioSpec {
            seed: datagen::split_seed(spec.seed, k as u64),
            ..spec.clone()
        };
        let ds = datagen::generate(&trial)?;
        let truth = ds
            .client(client)
            .true_theta()
            .ok_or_else(|| Error::config("client has no true model"))?
            .clone();
        let op = AffineRound::compile(&ds, config)?;
        let mut rounds = config.max_rounds as u64;
        if config.early_stop {
            rounds = rounds.min(spectral::early_stopping_for(&ds, config)?.t as u64);
        }
        let theta0 = config.init.clone().unwrap_or_else(|| DVector::zeros(op.dim()));
        let b = op.offset(&ds.stacked_responses())?;
        let fed = op.advance(&theta0, &b, rounds);
        let c = ds.client(client);
        let local = min_norm_least_squares(c.features()?, c.responses())?;
        acc.add((local - &truth).norm_squared(), (fed - &truth).norm_squared());
    }
    acc.gain(scale)
}

/// `2 * mean_k (f_hat(x_k) - f(x_k))^2` over uniform draws on `[-1, 1]`,
/// estimating `int_{-1}^{1} |f_hat - f|^2 dx`.
pub fn mse_monte_carlo(
    f_hat: impl Fn(f64) -> f64,
    f_true: impl Fn(f64) -> f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::config("Monte-Carlo MSE needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(MC_SEED_STRIDE));
    let mut acc = 0.0;
    for _ in 0..samples {
        let x: f64 = rng.random_range(-1.0..1.0);
        let e = f_hat(x) - f_true(x);
        acc += e * e;
    }
    Ok(2.0 * acc / samples as f64)
}

/// The Monte-Carlo MSE of [`mse_monte_carlo`] for finite-rank functions on
/// scalar inputs, with the draws folded into a `d x d` moment matrix so each
/// evaluation is `2 delta^T M delta` for the coefficient difference `delta`.
#[derive(Debug, Clone)]
pub struct PolynomialMse {
    moments: DMatrix<f64>,
}

impl PolynomialMse {
    pub fn new(kernel: &KernelSpec, samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::config("Monte-Carlo MSE needs at least one sample"));
        }
        if kernel.input_dim() != 1 {
            return Err(Error::shape("Monte-Carlo MSE is defined on scalar inputs"));
        }
        let d = kernel
            .feature_dim()
            .ok_or_else(|| Error::UnsupportedRepresentation("Monte-Carlo MSE needs a feature map".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(MC_SEED_STRIDE));
        let mut m = DMatrix::zeros(d, d);
        let mut phi = vec![0.0; d];
        for _ in 0..samples {
            let x: f64 = rng.random_range(-1.0..1.0);
            kernel.features_into(&[x], &mut phi)?;
            let v = DVector::from_column_slice(&phi);
            m.ger(1.0, &v, &v, 1.0);
        }
        Ok(PolynomialMse {
            moments: m * (2.0 / samples as f64),
        })
    }

    pub fn mse(&self, fitted: &DVector<f64>, truth: &DVector<f64>) -> f64 {
        let delta = fitted - truth;
        (delta.transpose() * &self.moments * &delta)[(0, 0)]
    }
}

/// Outcome of [`empirical_exceedance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Exceedance {
    pub fraction: f64,
    pub threshold: f64,
    pub draws: usize,
}

/// Fraction of noise redraws for which `(1/N)||f_t(x) - f(x)||^2` exceeds
/// `(3 kappa / (2 e eta t s)) (||f_0 - f||^2 + 3) + (3 kappa / N) ||Delta_f||^2`,
/// or `threshold_override` when given. Full-batch rounds only.
pub fn empirical_exceedance(
    ds: &FederatedDataset,
    config: &AlgorithmConfig,
    f: &DVector<f64>,
    t: usize,
    draws: usize,
    noise: Noise,
    seed: u64,
    threshold_override: Option<f64>,
) -> Result<Exceedance> {
    if draws < 100 {
        return Err(Error::config(format!(
            "exceedance needs at least 100 draws, got {draws}"
        )));
    }
    if t == 0 {
        return Err(Error::config("exceedance is defined for t >= 1"));
    }
    let op = AffineRound::compile(ds, config)?;
    let kappa = spectral::kappa(op.gamma(), config.algorithm)?;
    let theta0 = config.init.clone().unwrap_or_else(|| DVector::zeros(op.dim()));
    let n = ds.total() as f64;
    let threshold = match threshold_override {
        Some(v) => v,
        None => {
            let (_, dn) = spectral::heterogeneity_residual(ds, f)?;
            let ets = config.eta * t as f64 * config.local_steps() as f64;
            3.0 * kappa / (2.0 * E * ets) * ((&theta0 - f).norm_squared() + 3.0) + 3.0 * kappa / n * dn * dn
        }
    };
    let (p, s) = linalg::affine_power(&op.a, t as u64);
    let start = p * &theta0;
    let response_map = s * &op.psi;
    let phi = ds.stacked_features()?;
    let target = &phi * f;
    let mut exceed = 0usize;
    for k in 0..draws {
        let redraw = datagen::redraw_noise(ds, noise, datagen::split_seed(seed, k as u64))?;
        let theta_t = &start + &response_map * redraw.stacked_responses();
        let err = empirical_prediction_error(&(&phi * theta_t), &target)?;
        if err > threshold {
            exceed += 1;
        }
    }
    Ok(Exceedance {
        fraction: exceed as f64 / draws as f64,
        threshold,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClientData;
    use crate::kernel::KernelSpec;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn gradient_examples() {
        let c = ClientData::new(DMatrix::from_element(1, 1, 1.0), v(&[2.0]));
        let ds = FederatedDataset::new(KernelSpec::Linear { dim: 1 }, vec![c], 0.0).unwrap();
        assert_relative_eq!(global_gradient_norm(&v(&[0.0]), &ds).unwrap(), 4.0);
        assert_relative_eq!(GradientOracle::new(&ds).unwrap().norm(&v(&[0.0])), 4.0);
        assert_eq!(global_gradient_norm(&v(&[2.0]), &ds).unwrap(), 0.0);

        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = v(&[1.0, 2.0, 0.5]);
        let c = ClientData::new(x.clone(), y.clone());
        let ds = FederatedDataset::new(KernelSpec::Linear { dim: 2 }, vec![c], 0.0).unwrap();
        let ls = min_norm_least_squares(&x, &y).unwrap();
        assert!(global_gradient_norm(&ls, &ds).unwrap() <= 1e-8);
    }

    #[test]
    fn error_examples() {
        assert_eq!(estimation_error(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(estimation_error(&v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap(), 5.0);
        assert_eq!(estimation_error(&v(&[0.0, 1.0]), &v(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(
            empirical_prediction_error(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            empirical_prediction_error(&v(&[1.0, 1.0, 1.0]), &v(&[0.0, 0.0, 0.0])).unwrap(),
            1.0
        );
        assert_eq!(
            empirical_prediction_error(&v(&[1.0, -1.0]), &v(&[0.0, 0.0])).unwrap(),
            1.0
        );
    }

    #[test]
    fn min_norm_examples() {
        let t = min_norm_least_squares(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &v(&[2.0])).unwrap();
        assert_relative_eq!(t, v(&[2.0, 0.0]), epsilon = 1e-14);
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let t = min_norm_least_squares(&x, &v(&[1.0, 2.0])).unwrap();
        assert!((&x * &t - v(&[1.0, 2.0])).norm() < 1e-12);
        let t = min_norm_least_squares(&DMatrix::from_row_slice(2, 1, &[1.0, 1.0]), &v(&[1.0, 3.0])).unwrap();
        assert_relative_eq!(t[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn min_norm_with_zero_columns() {
        let spec = datagen::ScenarioSpec {
            seed: datagen::split_seed(0, 0),
            ..datagen::ScenarioSpec::subspace(6, 0)
        };
        let ds = datagen::generate(&spec).unwrap();
        let c = ds.client(spec.clients() - 1);
        let x = c.features().unwrap();
        let t = min_norm_least_squares(x, c.responses()).unwrap();
        assert!(t.iter().all(|v| v.is_finite()));
        // Normal equations hold and unobserved coordinates stay at zero.
        assert!((x.tr_mul(&(x * &t - c.responses()))).amax() < 1e-8 * x.nrows() as f64);
        for col in 0..x.ncols() {
            if x.column(col).iter().all(|&v| v == 0.0) {
                assert_eq!(t[col], 0.0);
            }
        }
    }

    #[test]
    fn gain_accumulator() {
        let mut acc = GainAccumulator::default();
        acc.add(4.0, 4.0);
        assert_eq!(acc.gain(GainScale::Squared).unwrap(), 1.0);
        acc.add(12.0, 0.0);
        assert_relative_eq!(acc.gain(GainScale::Squared).unwrap(), 4.0);
        assert_relative_eq!(acc.gain(GainScale::Norm).unwrap(), 2.0);
        let mut zero = GainAccumulator::default();
        zero.add(1.0, 0.0);
        assert!(matches!(zero.gain(GainScale::Norm), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mse_examples() {
        let f = |x: f64| x * x;
        assert_eq!(mse_monte_carlo(f, f, 1000, 1).unwrap(), 0.0);
        assert_relative_eq!(
            mse_monte_carlo(|x| f(x) + 1.0, f, 1000, 1).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        let est = mse_monte_carlo(|x| x, |_| 0.0, MC_SAMPLES, 3).unwrap();
        assert!((est - 2.0 / 3.0).abs() < 0.05 * 2.0 / 3.0);
    }

    #[test]
    fn polynomial_mse_matches_direct_sampling() {
        let k = KernelSpec::Monomial { degree: 5 };
        let fitted = v(&[0.1, 5.0, 0.3, -30.0, 0.0, 31.0]);
        let truth = datagen::chebyshev_u5_coefficients();
        let pm = PolynomialMse::new(&k, 20_000, 9).unwrap();
        let poly = |c: &DVector<f64>| {
            let c = c.clone();
            move |x: f64| c.iter().rev().fold(0.0, |acc, a| acc * x + a)
        };
        let direct = mse_monte_carlo(poly(&fitted), poly(&truth), 20_000, 9).unwrap();
        assert_relative_eq!(pm.mse(&fitted, &truth), direct, max_relative = 1e-9);
    }
}
