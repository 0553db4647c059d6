//! Numerical checks of the analytical results on small randomized instances.
//!
//! Each check reports the worst measured statistic next to the limit it must
//! stay under.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::datagen::{self, Family, Layout, Noise, ScenarioSpec};
use crate::dataset::{ClientData, FederatedDataset};
use crate::engine::{
    build_dual_operator, run_round_dual, run_round_primal, AffineRound, Algorithm, AlgorithmConfig,
    ModelState, Params,
};
use crate::error::Result;
use crate::kernel::KernelSpec;
use crate::linalg::SortedEigen;
use crate::metrics;
use crate::spectral;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst value of the checked statistic.
    pub measured: f64,
    /// Value it must not exceed.
    pub limit: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, measured: f64, limit: f64, detail: String) -> Self {
        CheckOutcome {
            name: name.into(),
            passed: measured <= limit,
            measured,
            limit,
            detail,
        }
    }
}

/// Instances per randomized check.
pub const INSTANCES: usize = 50;

const ALGORITHMS: [Algorithm; 5] = [
    Algorithm::FedAvg { local_steps: 1 },
    Algorithm::FedAvg { local_steps: 2 },
    Algorithm::FedAvg { local_steps: 5 },
    Algorithm::FedAvg { local_steps: 10 },
    Algorithm::FedProx,
];

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// A random linear-kernel instance: 2 to 4 clients of 1 to 6 points in 1 to
/// 4 dimensions, each with its own true model, noisy responses.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<FederatedDataset> {
    let m = rng.random_range(2..=4);
    let d = rng.random_range(1..=4);
    let clients = (0..m)
        .map(|_| {
            let n = rng.random_range(1..=6);
            let x = gaussian(rng, n, d);
            let theta = gaussian(rng, d, 1).column(0).into_owned();
            let y = &x * &theta + gaussian(rng, n, 1).column(0) * 0.3;
            ClientData::new(x, y).with_true_theta(theta)
        })
        .collect();
    FederatedDataset::new(KernelSpec::Linear { dim: d }, clients, 0.3)
}

/// A step size with `gamma` drawn uniformly from `[0.05, 0.95]`.
pub fn random_eta(ds: &FederatedDataset, rng: &mut ChaCha8Rng) -> Result<f64> {
    let top = spectral::gamma(ds, 1.0)?;
    let g: f64 = rng.random_range(0.05..0.95);
    Ok(if top > 0.0 { g / top } else { g })
}

fn rng_for(seed: u64, check: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(check);
    r
}

/// In-sample predictions of the literal simulation and of the
/// `P`-recursion over `rounds` rounds.
pub fn check_primal_dual(seed: u64, instances: usize, rounds: usize) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let ds = random_instance(&mut rng)?;
        let eta = random_eta(&ds, &mut rng)?;
        let alg = ALGORITHMS[k % ALGORITHMS.len()];
        let cfg = AlgorithmConfig::new(alg, eta, rounds);
        let phi = ds.stacked_features()?;
        let op = build_dual_operator(&ds, &cfg)?;
        let d = phi.ncols();
        let mut state = ModelState {
            round: 0,
            params: Params::Primal(DVector::zeros(d)),
        };
        let mut alpha = DVector::zeros(ds.total());
        for _ in 0..rounds {
            state = run_round_primal(&state, &ds, &cfg)?;
            alpha = run_round_dual(&alpha, &ds, &op, eta)?;
            let primal = &phi * state.theta().expect("primal state");
            let dual = op.predictions(&alpha);
            let scale = primal.amax().max(1.0);
            worst = worst.max((primal - dual).amax() / scale);
        }
    }
    Ok(CheckOutcome::new(
        "primal-dual",
        worst,
        1e-8,
        format!("{instances} instances, {rounds} rounds, max relative prediction gap"),
    ))
}

/// `Phi Psi = eta K_x P` and `Psi Phi beta = beta - A beta` through literal rounds.
pub fn check_operator_identities(seed: u64, instances: usize) -> Result<(CheckOutcome, CheckOutcome)> {
    let mut rng = rng_for(seed, 2);
    let (mut worst_psi, mut worst_probe) = (0.0_f64, 0.0_f64);
    for k in 0..instances {
        let ds = random_instance(&mut rng)?;
        let eta = random_eta(&ds, &mut rng)?;
        let alg = ALGORITHMS[k % ALGORITHMS.len()];
        let cfg = AlgorithmConfig::new(alg, eta, 1);
        let round = AffineRound::compile(&ds, &cfg)?;
        let dual = build_dual_operator(&ds, &cfg)?;
        let phi = ds.stacked_features()?;
        let lhs = &phi * &round.psi;
        let rhs = dual.kx.normalized() * dual.p() * eta;
        worst_psi = worst_psi.max((&lhs - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE));

        let d = phi.ncols();
        let beta: DVector<f64> = gaussian(&mut rng, d, 1).column(0).into_owned();
        let run = |theta: DVector<f64>, y: DVector<f64>| -> Result<DVector<f64>> {
            let probe = ds.with_responses(split(&y, &ds.sizes()))?;
            let s = ModelState {
                round: 0,
                params: Params::Primal(theta),
            };
            Ok(run_round_primal(&s, &probe, &cfg)?
                .theta()
                .expect("primal state")
                .clone())
        };
        let driven = run(DVector::zeros(d), &phi * &beta)?;
        let free = run(beta.clone(), DVector::zeros(ds.total()))?;
        let gap = (&driven - (&beta - &free)).amax() / beta.amax().max(1.0);
        worst_probe = worst_probe.max(gap);
    }
    Ok((
        CheckOutcome::new(
            "psi-equals-eta-kx-p",
            worst_psi,
            1e-10,
            format!("{instances} instances, relative Frobenius gap"),
        ),
        CheckOutcome::new(
            "psi-phi-is-one-minus-round",
            worst_probe,
            1e-8,
            format!("{instances} instances, random probes"),
        ),
    ))
}

fn split(y: &DVector<f64>, sizes: &[usize]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut o = 0;
    for &n in sizes {
        out.push(y.rows(o, n).into_owned());
        o += n;
    }
    out
}

/// Spectral facts on randomized instances for every algorithm:
/// eigenvalues of `I - eta K_x P` lie in `[0, 1]`, `cond(P) <= kappa`, and
/// each `Lambda_i` lies in `[p_min lambda_i, p_max lambda_i]`.
pub fn check_spectral_ranges(seed: u64, instances: usize) -> Result<[CheckOutcome; 3]> {
    let mut rng = rng_for(seed, 3);
    let (mut range_v, mut cond_v, mut brk_v) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..instances {
        let ds = random_instance(&mut rng)?;
        let eta = random_eta(&ds, &mut rng)?;
        for alg in ALGORITHMS {
            let cfg = AlgorithmConfig::new(alg, eta, 1);
            let r = spectral::spectral_report(&ds, &cfg)?;
            for &l in &r.big_lambda {
                let mu = 1.0 - eta * l;
                range_v = range_v.max(-mu).max(mu - 1.0);
            }
            cond_v = cond_v.max(r.cond_p() / r.kappa - 1.0);
            let scale = r.lambda.first().copied().unwrap_or(0.0).max(1e-300) * r.p_max;
            for (&big, &small) in r.big_lambda.iter().zip(&r.lambda) {
                let small = small.max(0.0);
                let lo = r.p_min * small - big;
                let hi = big - r.p_max * small;
                brk_v = brk_v.max(lo / scale).max(hi / scale);
            }
        }
    }
    let detail = format!("{instances} instances x {} algorithms", ALGORITHMS.len());
    Ok([
        CheckOutcome::new(
            "iteration-spectrum-in-unit-interval",
            range_v,
            1e-10,
            detail.clone(),
        ),
        CheckOutcome::new("cond-p-below-kappa", cond_v, 1e-10, detail.clone()),
        CheckOutcome::new("ostrowski-brackets", brk_v, 1e-10, detail),
    ])
}

/// Monte-Carlo mean of `||f_t - f||_N^2` against the bound, `t = 1..=T`,
/// for each algorithm on an `M = 3`, `d = 5`, `n_i = 10` instance.
/// Reports the worst ratio of mean to `bound * (1 + 3/sqrt(draws))`.
pub fn check_bound_domination(seed: u64, draws: usize) -> Result<[CheckOutcome; 2]> {
    let spec = ScenarioSpec {
        family: Family::LinearHomogeneous,
        sizes: vec![10; 3],
        dim: 5,
        sigma: 0.5,
        seed,
        noise: Noise::Gaussian,
    };
    let ds = datagen::generate(&spec)?;
    let f = ds.theta_star().expect("generated").clone();
    let phi = ds.stacked_features()?;
    let truth = &phi * &f;
    let n = ds.total() as f64;
    let slack = 1.0 + 3.0 / (draws as f64).sqrt();
    let (mut worst, mut worst_fr) = (0.0_f64, 0.0_f64);
    let mut horizon = 0;
    let redraws = (0..draws)
        .map(|k| datagen::redraw_noise(&ds, Noise::Gaussian, datagen::split_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    for alg in [
        Algorithm::FedAvg { local_steps: 1 },
        Algorithm::FedAvg { local_steps: 5 },
        Algorithm::FedAvg { local_steps: 10 },
        Algorithm::FedProx,
    ] {
        let cfg = AlgorithmConfig::new(alg, 0.1, 0);
        let op = AffineRound::compile(&ds, &cfg)?;
        let report = spectral::spectral_report_from_round(&ds, &op)?;
        let t_stop = spectral::early_stopping_for(&ds, &cfg)?.t.min(2000);
        horizon = horizon.max(t_stop);
        let offsets = redraws
            .iter()
            .map(|r| op.offset(&r.stacked_responses()))
            .collect::<Result<Vec<_>>>()?;
        let mut thetas = vec![DVector::zeros(op.dim()); draws];
        for t in 1..=t_stop {
            let mut mean = 0.0;
            for (th, b) in thetas.iter_mut().zip(&offsets) {
                *th = op.step(th, b);
                mean += (&phi * &*th - &truth).norm_squared() / n;
            }
            mean /= draws as f64;
            let bound = spectral::theory_bound(&report, &ds, &f, &DVector::zeros(f.len()), ds.sigma(), t)?;
            worst = worst.max(mean / (bound.total * slack));
            if let Some(fr) = bound.finite_rank {
                worst_fr = worst_fr.max(mean / (fr * slack));
            }
        }
    }
    let detail = format!("{draws} draws, t <= {horizon}");
    Ok([
        CheckOutcome::new("bound-dominates-mean-error", worst, 1.0, detail.clone()),
        CheckOutcome::new("finite-rank-bound-dominates", worst_fr, 1.0, detail),
    ])
}

fn heterogeneous_instance(seed: u64, k: usize, layout: Layout) -> Result<FederatedDataset> {
    let mut rng = rng_for(seed ^ k as u64, 5);
    let m = rng.random_range(2..=5);
    let d = rng.random_range(2..=6);
    let sizes = (0..m).map(|_| rng.random_range(d..=3 * d)).collect();
    let gamma = rng.random_range(0.0..3.0);
    datagen::generate(&ScenarioSpec {
        family: Family::Heterogeneous { gamma, layout },
        sizes,
        dim: d,
        sigma: 0.5,
        seed: datagen::split_seed(seed, k as u64),
        noise: Noise::Gaussian,
    })
}

/// Properties of the limit `theta_bar` on heterogeneous instances:
/// per-round contraction at rate `1 - s eta rho_N / kappa`, the exact noisy
/// plateau against `2 kappa d sigma^2 / (N rho_N)`, and the per-client model
/// bound.
pub fn check_limit_model(seed: u64, instances: usize) -> Result<[CheckOutcome; 3]> {
    let (mut contraction, mut plateau, mut model) = (0.0_f64, 0.0_f64, 0.0_f64);
    for k in 0..instances {
        let layout = if k % 2 == 0 {
            Layout::Symmetric
        } else {
            Layout::Anchored
        };
        let ds = heterogeneous_instance(seed, k, layout)?;
        let top = spectral::gamma(&ds, 1.0)?;
        let eta = 0.9 / top;
        let alg = ALGORITHMS[k % ALGORITHMS.len()];
        let cfg = AlgorithmConfig::new(alg, eta, 0);
        let op = AffineRound::compile(&ds, &cfg)?;
        let lm = spectral::limit_model(&ds, &cfg)?;
        let theta_bar = DVector::from_vec(lm.theta_bar.clone());
        let s = alg.local_steps() as f64;
        let rate = 1.0 - s * eta * lm.rho_n / lm.kappa;

        let b = op.offset(&ds.stacked_true_values()?)?;
        let mut theta = DVector::zeros(op.dim());
        let mut prev = (&theta - &theta_bar).norm();
        for _ in 0..50 {
            theta = op.step(&theta, &b);
            let cur = (&theta - &theta_bar).norm();
            if prev > 1e-12 {
                contraction = contraction.max(cur / prev - rate);
            }
            prev = cur;
        }

        // theta_inf - theta_bar = (I - A)^{-1} Psi eps exactly.
        let resolvent = SortedEigen::new(&op.spectral_matrix())?.apply(|v| 1.0 / v) / eta;
        let m = resolvent * &op.psi;
        let sigma = ds.sigma();
        let d = op.dim() as f64;
        let n = ds.total() as f64;
        let exact = sigma * sigma * m.norm_squared();
        let limit = 2.0 * lm.kappa * d * sigma * sigma / (n * lm.rho_n);
        plateau = plateau.max(exact / limit);

        for (j, c) in ds.clients().iter().enumerate() {
            let gap = (&theta_bar - c.true_theta().expect("generated")).norm();
            let bound = lm.client_bounds[j];
            let ratio = if bound > 0.0 {
                gap / bound
            } else if gap <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            model = model.max(ratio);
        }
    }
    let detail = format!("{instances} heterogeneous instances");
    Ok([
        CheckOutcome::new("limit-contraction", contraction, 1e-12, detail.clone()),
        CheckOutcome::new("noisy-plateau-ratio", plateau, 1.0, detail.clone()),
        CheckOutcome::new("limit-model-bound", model, 1.0 + 1e-10, detail),
    ])
}

/// Empirical exceedance at `N = 50` and `N = 200` on matched instances
/// (same dimension, model and client count). Reports the larger minus the
/// smaller-N fraction; it must not be positive.
pub fn check_exceedance_direction(seed: u64, draws: usize) -> Result<(CheckOutcome, [f64; 2])> {
    let mut fractions = [0.0; 2];
    for (i, n) in [10usize, 40].into_iter().enumerate() {
        let spec = ScenarioSpec {
            family: Family::LinearHomogeneous,
            sizes: vec![n; 5],
            dim: 5,
            sigma: 1.0,
            seed,
            noise: Noise::Gaussian,
        };
        let ds = datagen::generate(&spec)?;
        let f = ds.theta_star().expect("generated").clone();
        let cfg = AlgorithmConfig::fedavg(1, 0.1, 0);
        let ex = metrics::empirical_exceedance(&ds, &cfg, &f, 400, draws, Noise::Gaussian, seed, None)?;
        fractions[i] = ex.fraction;
    }
    Ok((
        CheckOutcome::new(
            "exceedance-decays-with-n",
            fractions[1] - fractions[0],
            0.0,
            format!(
                "{draws} draws: {:.4} at N=50, {:.4} at N=200",
                fractions[0], fractions[1]
            ),
        ),
        fractions,
    ))
}

/// The whole suite at its standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![check_primal_dual(seed, INSTANCES, 20)?];
    let (a, b) = check_operator_identities(seed, INSTANCES)?;
    out.extend([a, b]);
    out.extend(check_spectral_ranges(seed, INSTANCES)?);
    out.extend(check_bound_domination(seed, 200)?);
    out.extend(check_limit_model(seed, INSTANCES)?);
    out.push(check_exceedance_direction(seed, 500)?.0);
    Ok(out)
}
