//! Computable quantities from the convergence analysis: stability constants,
//! eigen-structure of `K_x P`, bias/variance terms, early stopping, error
//! bounds, the limiting model and federation-gain predictors.
//!
//! Two routes to the spectrum are available. [`spectral_report`] works on the
//! `N x N` matrices and needs only kernel evaluations. For finite-rank kernels
//! [`spectral_report_finite_rank`] uses the `d x d` identities
//! `Phi^T P Phi / N = sum_i w_i Q_i G_i` and `Phi^T Phi / N`, whose nonzero
//! spectra coincide with those of `K_x P` and `K_x`.

use std::f64::consts::E;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::FederatedDataset;
use crate::engine::{dual, AffineRound, Algorithm, AlgorithmConfig};
use crate::error::{Error, Result};
use crate::kernel;
use crate::linalg::{self, SortedEigen};

/// Upper limit of the early-stopping scan.
pub const EARLY_STOP_CAP: usize = 1_000_000;

/// Relative threshold defining the numerical rank of `K_x`.
pub const RANK_TOL: f64 = 1e-10;

fn local_norms(ds: &FederatedDataset) -> Result<Vec<f64>> {
    ds.clients()
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            match c.features() {
                Ok(phi) if phi.ncols() < c.len() => linalg::psd_norm(&(phi.tr_mul(phi) / n)),
                Ok(phi) => linalg::psd_norm(&(phi * phi.transpose() / n)),
                Err(_) => linalg::psd_norm(&kernel::gram(ds.kernel(), c.covariates())?.normalized()),
            }
        })
        .collect()
}

/// `gamma = eta max_i ||K_{x_i}||`.
pub fn gamma(ds: &FederatedDataset, eta: f64) -> Result<f64> {
    Ok(eta * local_norms(ds)?.into_iter().fold(0.0, f64::max))
}

/// Bound on the condition number of `P`.
///
/// FedAvg: `gamma s / (1 - (1 - gamma)^s)`, tending to 1 as `gamma -> 0`.
/// FedProx: `1 + gamma`.
pub fn kappa(gamma: f64, algorithm: Algorithm) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
    }
    match algorithm {
        Algorithm::FedProx => Ok(1.0 + gamma),
        Algorithm::FedAvg { local_steps } => {
            if gamma >= 1.0 {
                return Err(Error::Stability { client: 0, gamma });
            }
            let s = local_steps as f64;
            if local_steps == 1 || gamma == 0.0 {
                return Ok(1.0);
            }
            if gamma < 1e-8 {
                // 1 - (1-g)^s = s g (1 - (s-1) g / 2 + O(g^2)).
                return Ok(1.0 / (1.0 - (s - 1.0) * gamma / 2.0));
            }
            // (1 - gamma)^s via exp/ln_1p keeps precision for small gamma.
            let denom = -((s * (-gamma).ln_1p()).exp_m1());
            Ok(gamma * s / denom)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub gamma: f64,
    pub kappa: f64,
    pub eta: f64,
    pub local_steps: usize,
    /// `N`.
    pub n: usize,
    /// Eigenvalues of `K_x`, descending, length `N`.
    pub lambda: Vec<f64>,
    /// Eigenvalues of `K_x P`, descending, length `N`.
    pub big_lambda: Vec<f64>,
    /// Count of `lambda_i > RANK_TOL * lambda_1`.
    pub rank: usize,
    /// Extreme eigenvalues of `P`.
    pub p_min: f64,
    pub p_max: f64,
}

impl SpectralReport {
    pub fn cond_p(&self) -> f64 {
        self.p_max / self.p_min
    }

    /// `lambda_{d_hat}`, the smallest eigenvalue counted in the rank.
    pub fn smallest_nonzero_lambda(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.lambda[self.rank - 1]
        }
    }
}

fn numerical_rank(lambda: &[f64]) -> usize {
    let top = lambda.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    lambda.iter().filter(|&&v| v > RANK_TOL * top).count()
}

/// Eigenvalue of `P_ii` belonging to an eigenvalue `mu` of `K_{x_i}`.
fn p_eigenvalue(mu: f64, algorithm: Algorithm, eta: f64) -> f64 {
    match algorithm {
        Algorithm::FedProx => 1.0 / (1.0 + eta * mu),
        Algorithm::FedAvg { local_steps } => {
            let l = 1.0 - eta * mu;
            // sum_{tau<s} l^tau, summed directly: s is small and l may be ~1.
            let mut acc = 0.0;
            let mut pw = 1.0;
            for _ in 0..local_steps {
                acc += pw;
                pw *= l;
            }
            acc
        }
    }
}

/// Rejects FedAvg when some client has `eta ||K_i|| >= 1`; returns `gamma`.
pub fn check_stability(ds: &FederatedDataset, config: &AlgorithmConfig) -> Result<f64> {
    let norms = local_norms(ds)?;
    if let Algorithm::FedAvg { .. } = config.algorithm {
        for (i, &k) in norms.iter().enumerate() {
            let g = config.eta * k;
            if g >= 1.0 {
                return Err(Error::Stability { client: i, gamma: g });
            }
        }
    }
    Ok(config.eta * norms.into_iter().fold(0.0, f64::max))
}

/// Spectral report from the `N x N` matrices, with `P^{1/2}` assembled from
/// per-block eigendecompositions.
pub fn spectral_report(ds: &FederatedDataset, config: &AlgorithmConfig) -> Result<SpectralReport> {
    config.validate()?;
    let gamma = check_stability(ds, config)?;
    let kappa = kappa(gamma, config.algorithm)?;
    let n = ds.total();
    let kx = kernel::gram(ds.kernel(), &ds.stacked_covariates())?.normalized();
    let mut half = DMatrix::zeros(n, n);
    let (mut p_min, mut p_max) = (f64::INFINITY, 0.0_f64);
    for (k_local, &off) in dual::local_grams(ds)?.iter().zip(&ds.offsets()) {
        let eig = SortedEigen::new(k_local)?;
        for &mu in eig.values.iter() {
            let p = p_eigenvalue(mu.max(0.0), config.algorithm, config.eta);
            p_min = p_min.min(p);
            p_max = p_max.max(p);
        }
        let block = eig.apply(|mu| p_eigenvalue(mu.max(0.0), config.algorithm, config.eta).sqrt());
        half.view_mut((off, off), (block.nrows(), block.ncols()))
            .copy_from(&block);
    }
    let lambda = linalg::sym_eigenvalues(&kx)?;
    let big_lambda = linalg::sym_eigenvalues(&(&half * &kx * &half))?;
    Ok(SpectralReport {
        gamma,
        kappa,
        eta: config.eta,
        local_steps: config.local_steps(),
        n,
        rank: numerical_rank(&lambda),
        lambda,
        big_lambda,
        p_min,
        p_max,
    })
}

/// Spectral report through `d x d` matrices; the `N - d` structural zeros are
/// appended explicitly.
pub fn spectral_report_finite_rank(
    ds: &FederatedDataset,
    config: &AlgorithmConfig,
) -> Result<SpectralReport> {
    let full = AlgorithmConfig {
        batch_size: None,
        ..config.clone()
    };
    let op = AffineRound::compile(ds, &full)?;
    spectral_report_from_round(ds, &op)
}

/// As [`spectral_report_finite_rank`], reusing an already compiled round.
pub fn spectral_report_from_round(ds: &FederatedDataset, op: &AffineRound) -> Result<SpectralReport> {
    let gamma = op.gamma();
    let kappa = kappa(gamma, op.algorithm)?;
    let n = ds.total();
    let phi = ds.stacked_features()?;
    let d = phi.ncols();
    let pad = |mut v: Vec<f64>| {
        v.truncate(n);
        v.resize(n, 0.0);
        v
    };
    let lambda = pad(linalg::sym_eigenvalues(&(phi.tr_mul(&phi) / n as f64))?);
    let big_lambda = pad(linalg::sym_eigenvalues(&op.spectral_matrix())?);
    let (mut p_min, mut p_max) = (f64::INFINITY, 0.0_f64);
    for c in ds.clients() {
        let phi_i = c.features()?;
        let ni = c.len();
        let g = phi_i.tr_mul(phi_i) / ni as f64;
        let mut mus = linalg::sym_eigenvalues(&g)?;
        mus.truncate(ni.min(d));
        if ni > d {
            mus.push(0.0);
        }
        for mu in mus {
            let p = p_eigenvalue(mu.max(0.0), op.algorithm, op.eta);
            p_min = p_min.min(p);
            p_max = p_max.max(p);
        }
    }
    Ok(SpectralReport {
        gamma,
        kappa,
        eta: op.eta,
        local_steps: op.algorithm.local_steps(),
        n,
        rank: numerical_rank(&lambda),
        lambda,
        big_lambda,
        p_min,
        p_max,
    })
}

/// A computed term together with its closed-form upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounded {
    pub value: f64,
    pub bound: f64,
}

/// `delta_1 = (1/s) max_i (1 - eta Lambda_i)^{2t} Lambda_i`, bounded by
/// `1 / (2 e eta t s)`.
pub fn delta1(report: &SpectralReport, eta: f64, s: usize, t: usize) -> Bounded {
    let value = report
        .big_lambda
        .iter()
        .map(|&l| (1.0 - eta * l).powi(2 * t as i32) * l)
        .fold(0.0, f64::max)
        / s as f64;
    Bounded {
        value,
        bound: 1.0 / (2.0 * E * eta * t as f64 * s as f64),
    }
}

/// `delta_2 = (1/N) sum_i (1 - (1 - eta Lambda_i)^t)^2`, bounded by
/// `(1/N) sum_i min{1, eta t Lambda_i}`.
pub fn delta2(report: &SpectralReport, eta: f64, t: usize) -> Bounded {
    let n = report.n as f64;
    let tf = t as f64;
    let (mut value, mut bound) = (0.0, 0.0);
    for &l in &report.big_lambda {
        let l = l.max(0.0);
        value += (1.0 - (1.0 - eta * l).powi(t as i32)).powi(2);
        bound += (eta * tf * l).min(1.0);
    }
    Bounded {
        value: value / n,
        bound: bound / n,
    }
}

/// Empirical Rademacher complexity `sqrt((1/N) sum_i min{lambda_i, eps^2})`.
pub fn rademacher(lambda: &[f64], n: usize, eps: f64) -> f64 {
    let e2 = eps * eps;
    (lambda.iter().map(|&l| l.max(0.0).min(e2)).sum::<f64>() / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EarlyStopping {
    pub t: usize,
    /// The condition still held at [`EARLY_STOP_CAP`].
    pub saturated: bool,
}

/// `T = max{t : R(1/sqrt(eta t s)) <= 1/(sqrt(2e) sigma eta t s)}`, scanning
/// upward from `t = 1` and stopping at the first violation.
pub fn early_stopping_time(lambda: &[f64], n: usize, eta: f64, s: usize, sigma: f64) -> EarlyStopping {
    early_stopping_time_capped(lambda, n, eta, s, sigma, EARLY_STOP_CAP)
}

pub fn early_stopping_time_capped(
    lambda: &[f64],
    n: usize,
    eta: f64,
    s: usize,
    sigma: f64,
    cap: usize,
) -> EarlyStopping {
    // Ascending with prefix sums: sum_i min{l_i, e} in O(log N) per t.
    let mut asc: Vec<f64> = lambda.iter().map(|&l| l.max(0.0)).filter(|&l| l > 0.0).collect();
    asc.sort_by(f64::total_cmp);
    let mut prefix = Vec::with_capacity(asc.len() + 1);
    prefix.push(0.0);
    for &l in &asc {
        prefix.push(prefix.last().unwrap() + l);
    }
    let holds = |t: usize| {
        let ets = eta * t as f64 * s as f64;
        let e2 = 1.0 / ets;
        let k = asc.partition_point(|&l| l < e2);
        let sum = prefix[k] + e2 * (asc.len() - k) as f64;
        let r = (sum / n as f64).sqrt();
        r <= 1.0 / ((2.0 * E).sqrt() * sigma * ets)
    };
    for t in 1..=cap {
        if !holds(t) {
            return EarlyStopping {
                t: t - 1,
                saturated: false,
            };
        }
    }
    EarlyStopping {
        t: cap,
        saturated: true,
    }
}

/// Early-stopping time for a dataset, using its noise scale.
pub fn early_stopping_for(ds: &FederatedDataset, config: &AlgorithmConfig) -> Result<EarlyStopping> {
    let lambda = if let Ok(phi) = ds.stacked_features() {
        linalg::sym_eigenvalues(&(phi.tr_mul(&phi) / ds.total() as f64))?
    } else {
        linalg::sym_eigenvalues(&kernel::gram(ds.kernel(), &ds.stacked_covariates())?.normalized())?
    };
    Ok(early_stopping_time(
        &lambda,
        ds.total(),
        config.eta,
        config.local_steps(),
        ds.sigma(),
    ))
}

/// `Delta_f = (f_1*(x_1), ..., f_M*(x_M)) - f(x)` and its Euclidean norm.
pub fn heterogeneity_residual(ds: &FederatedDataset, theta: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let truth = ds.stacked_true_values()?;
    let phi = ds.stacked_features()?;
    if phi.ncols() != theta.len() {
        return Err(Error::shape(format!(
            "model has length {}, feature dimension is {}",
            theta.len(),
            phi.ncols()
        )));
    }
    let delta = truth - phi * theta;
    let norm = delta.norm();
    Ok((delta, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryBound {
    pub t: usize,
    /// `3 kappa delta_1(t) ||f_0 - f||^2`.
    pub bias: f64,
    /// `3 kappa delta_2(t) sigma^2`.
    pub variance: f64,
    /// `(3 kappa / N) ||Delta_f||^2`.
    pub heterogeneity: f64,
    pub total: f64,
    /// Exponential finite-rank form, when `rank < N`.
    pub finite_rank: Option<f64>,
}

/// Bound on `E ||f_t - f||_N^2` from squared distances already computed.
pub fn theory_bound_from_parts(
    report: &SpectralReport,
    f0_dist_sq: f64,
    delta_sq: f64,
    sigma: f64,
    t: usize,
) -> TheoryBound {
    let k3 = 3.0 * report.kappa;
    let n = report.n as f64;
    let s = report.local_steps;
    let bias = k3 * delta1(report, report.eta, s, t).value * f0_dist_sq;
    let variance = k3 * delta2(report, report.eta, t).value * sigma * sigma;
    let heterogeneity = k3 * delta_sq / n;
    let finite_rank = (report.rank < report.n).then(|| {
        let es = report.eta * s as f64;
        let rate = 2.0 * es / report.kappa * report.smallest_nonzero_lambda();
        k3 / es * f0_dist_sq * (-rate * t as f64).exp()
            + k3 * sigma * sigma * report.rank as f64 / n
            + heterogeneity
    });
    TheoryBound {
        t,
        bias,
        variance,
        heterogeneity,
        total: bias + variance + heterogeneity,
        finite_rank,
    }
}

/// Bound for target coefficients `f` started from `f0`.
pub fn theory_bound(
    report: &SpectralReport,
    ds: &FederatedDataset,
    f: &DVector<f64>,
    f0: &DVector<f64>,
    sigma: f64,
    t: usize,
) -> Result<TheoryBound> {
    if f.len() != f0.len() {
        return Err(Error::shape("target and initial model differ in length"));
    }
    let (_, dn) = heterogeneity_residual(ds, f)?;
    Ok(theory_bound_from_parts(
        report,
        (f0 - f).norm_squared(),
        dn * dn,
        sigma,
        t,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitModel {
    pub theta_bar: Vec<f64>,
    /// `lambda_min(Phi^T Phi) / N`.
    pub rho_n: f64,
    pub kappa: f64,
    /// `sqrt(kappa / (N rho_N)) ||Delta_{f_j*}||` per client.
    pub client_bounds: Vec<f64>,
}

/// `lambda_min(Phi^T Phi / N)`.
pub fn rho_n(ds: &FederatedDataset) -> Result<f64> {
    let phi = ds.stacked_features()?;
    let eig = linalg::sym_eigenvalues(&(phi.tr_mul(&phi) / ds.total() as f64))?;
    Ok(eig.last().copied().unwrap_or(0.0).max(0.0))
}

fn noise_free_offset(ds: &FederatedDataset, op: &AffineRound) -> Result<DVector<f64>> {
    op.offset(&ds.stacked_true_values()?)
}

fn limit_from_theta(ds: &FederatedDataset, op: &AffineRound, theta_bar: DVector<f64>) -> Result<LimitModel> {
    let kappa = kappa(op.gamma(), op.algorithm)?;
    let rho = rho_n(ds)?;
    let n = ds.total() as f64;
    let client_bounds = ds
        .clients()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let tj = c
                .true_theta()
                .ok_or_else(|| Error::config(format!("client {j} has no true coefficients")))?;
            let (_, dn) = heterogeneity_residual(ds, tj)?;
            Ok(if rho > 0.0 {
                (kappa / (n * rho)).sqrt() * dn
            } else {
                f64::INFINITY
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LimitModel {
        theta_bar: theta_bar.iter().copied().collect(),
        rho_n: rho,
        kappa,
        client_bounds,
    })
}

/// Limit of the noise-free recursion, `theta_bar = (I - A)^{-1} b*`.
pub fn limit_model(ds: &FederatedDataset, config: &AlgorithmConfig) -> Result<LimitModel> {
    let full = AlgorithmConfig {
        batch_size: None,
        ..config.clone()
    };
    let op = AffineRound::compile(ds, &full)?;
    let theta_bar = op.fixed_point(&noise_free_offset(ds, &op)?)?;
    limit_from_theta(ds, &op, theta_bar)
}

/// Same limit, found by iterating the noise-free round until the update is
/// below `tol`.
pub fn limit_model_by_iteration(
    ds: &FederatedDataset,
    config: &AlgorithmConfig,
    tol: f64,
    max_rounds: usize,
) -> Result<LimitModel> {
    let full = AlgorithmConfig {
        batch_size: None,
        ..config.clone()
    };
    let op = AffineRound::compile(ds, &full)?;
    let b = noise_free_offset(ds, &op)?;
    let mut theta = DVector::zeros(op.dim());
    for _ in 0..max_rounds {
        let next = op.step(&theta, &b);
        let moved = (&next - &theta).norm();
        theta = next;
        if moved <= tol {
            return limit_from_theta(ds, &op, theta);
        }
    }
    Err(Error::Degenerate(format!(
        "noise-free recursion did not settle within {max_rounds} rounds"
    )))
}

/// Order-level federation-gain predictor (constants set to 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FgPrediction {
    pub value: f64,
    /// Heterogeneity below which a data-scarce client gains:
    /// `B sqrt(1 - n_j/d)`.
    pub scarce_threshold: f64,
    /// Heterogeneity below which a data-rich client gains:
    /// `min{sigma sqrt(d/n_j), B}`.
    pub rich_threshold: f64,
}

/// Inputs to the federation-gain predictors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgInputs {
    pub kappa: f64,
    pub sigma: f64,
    /// RKHS radius `B`.
    pub radius: f64,
    /// Client sample size `n_j`.
    pub n_j: usize,
    /// Feature dimension `d`.
    pub d: usize,
    /// Total sample size `N`.
    pub n_total: usize,
}

fn fg_thresholds(p: &FgInputs) -> (f64, f64) {
    let ratio = p.n_j as f64 / p.d as f64;
    (
        p.radius * (1.0 - ratio).max(0.0).sqrt(),
        (p.sigma * (1.0 / ratio).sqrt()).min(p.radius),
    )
}

/// Predictor under model heterogeneity `het` (maximum pairwise distance).
pub fn fg_predictor(p: &FgInputs, het: f64) -> FgPrediction {
    let (d, nj, n) = (p.d as f64, p.n_j as f64, p.n_total as f64);
    let b2 = p.radius * p.radius;
    let s2 = p.sigma * p.sigma;
    let num = (s2 * d / nj).min(b2) + (1.0 - nj / d).max(0.0) * b2;
    let (scarce, rich) = fg_thresholds(p);
    FgPrediction {
        value: num / (s2 * d / n + het * het) / p.kappa,
        scarce_threshold: scarce,
        rich_threshold: rich,
    }
}

/// Predictor under the subspace model with local rank `r_j` and a shared
/// true model.
pub fn fg_predictor_subspace(p: &FgInputs, r_j: usize) -> FgPrediction {
    let (d, nj, n) = (p.d as f64, p.n_j as f64, p.n_total as f64);
    let b2 = p.radius * p.radius;
    let s2 = p.sigma * p.sigma;
    let num = (s2 * d / nj).min(b2) + (1.0 - r_j as f64 / d).max(0.0) * b2;
    let (scarce, rich) = fg_thresholds(p);
    FgPrediction {
        value: num / (s2 * d / n) / p.kappa,
        scarce_threshold: scarce,
        rich_threshold: rich,
    }
}
