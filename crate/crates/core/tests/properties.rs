//! Property tests over small random instances.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedkernel::engine::{
    aggregate, build_dual_operator, fedavg_local_update, fedprox_local_update, local_gd_step, partition,
    run_round_dual, run_round_primal, run_training, AffineRound, ModelState, Params,
};
use fedkernel::kernel::{self, ImplicitKernel};
use fedkernel::metrics::{estimation_error, min_norm_least_squares, GainAccumulator, GainScale};
use fedkernel::{spectral, Algorithm, AlgorithmConfig, ClientData, FederatedDataset, KernelSpec};

#[derive(Debug, Clone)]
struct Instance {
    sizes: Vec<usize>,
    dim: usize,
    seed: u64,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=4, 1usize..=4, any::<u64>()).prop_flat_map(|(m, dim, seed)| {
        prop::collection::vec(1usize..=6, m).prop_map(move |sizes| Instance { sizes, dim, seed })
    })
}

/// Gaussian covariates, per-client models near a shared one, small noise.
fn build(inst: &Instance) -> FederatedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
    let d = inst.dim;
    let base: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let clients = inst
        .sizes
        .iter()
        .map(|&n| {
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
            let theta = DVector::from_fn(d, |k, _| base[k] + rng.random_range(-0.3..0.3));
            let y = &x * &theta + DVector::from_fn(n, |_, _| rng.random_range(-0.2..0.2));
            ClientData::new(x, y).with_true_theta(theta)
        })
        .collect();
    FederatedDataset::new(KernelSpec::Linear { dim: d }, clients, 0.1).unwrap()
}

/// Step size putting `gamma` at `target`.
fn eta_for(ds: &FederatedDataset, target: f64) -> f64 {
    let g1 = spectral::gamma(ds, 1.0).unwrap();
    if g1 > 0.0 {
        target / g1
    } else {
        0.1
    }
}

fn algorithms() -> impl Strategy<Value = Algorithm> {
    prop_oneof![
        (1usize..=10).prop_map(|s| Algorithm::FedAvg { local_steps: s }),
        Just(Algorithm::FedProx),
    ]
}

fn scale(v: &DVector<f64>) -> f64 {
    1.0 + v.amax()
}

/// Orthonormal basis of the row space by two-pass Gram-Schmidt. Kept independent of
/// nalgebra's SVD, which is inaccurate on matrices with exactly-zero columns.
fn row_space_basis(x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..x.nrows() {
        let mut v = x.row(i).transpose();
        for _ in 0..2 {
            for q in &basis {
                v -= q * q.dot(&v);
            }
        }
        let n = v.norm();
        if n > 1e-9 {
            basis.push(v / n);
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn primal_and_dual_predictions_agree(inst in instance(), alg in algorithms(), target in 0.05f64..0.95) {
        let ds = build(&inst);
        let cfg = AlgorithmConfig::new(alg, eta_for(&ds, target), 20);
        let op = build_dual_operator(&ds, &cfg).unwrap();
        let phi = ds.stacked_features().unwrap();
        let mut state = ModelState { round: 0, params: Params::Primal(DVector::zeros(inst.dim)) };
        let mut alpha = DVector::zeros(ds.total());
        for _ in 0..20 {
            state = run_round_primal(&state, &ds, &cfg).unwrap();
            alpha = run_round_dual(&alpha, &ds, &op, cfg.eta).unwrap();
            let primal = &phi * state.theta().unwrap();
            let dual = op.predictions(&alpha);
            prop_assert!((&primal - &dual).amax() <= 1e-8 * scale(&primal));
        }
        prop_assert_eq!(state.round, 20);
    }

    #[test]
    fn psi_phi_is_identity_minus_a(inst in instance(), alg in algorithms(), target in 0.05f64..0.95) {
        let ds = build(&inst);
        let cfg = AlgorithmConfig::new(alg, eta_for(&ds, target), 1);
        let op = AffineRound::compile(&ds, &cfg).unwrap();
        let phi = ds.stacked_features().unwrap();
        let d = inst.dim;
        let lhs = &op.psi * &phi;
        let rhs = DMatrix::identity(d, d) - &op.a;
        prop_assert!((lhs - rhs).amax() <= 1e-10);

        // Phi Psi = eta K_x P on the N x N side.
        let dual = build_dual_operator(&ds, &cfg).unwrap();
        let n = ds.total() as f64;
        let kx = &phi * phi.transpose() / n;
        let expect = kx * dual.p() * cfg.eta;
        let got = &phi * &op.psi;
        prop_assert!((&got - &expect).amax() <= 1e-10 * (1.0 + expect.amax()));
    }

    #[test]
    fn spectral_ranges_hold(inst in instance(), alg in algorithms(), target in 0.05f64..0.95) {
        let ds = build(&inst);
        let cfg = AlgorithmConfig::new(alg, eta_for(&ds, target), 1);
        let report = spectral::spectral_report(&ds, &cfg).unwrap();
        for &l in &report.big_lambda {
            let el = cfg.eta * l;
            prop_assert!((-1e-8..=1.0 + 1e-8).contains(&el), "eta Lambda = {el}");
        }
        prop_assert!(report.cond_p() <= report.kappa * (1.0 + 1e-10));
        prop_assert!(report.kappa >= 1.0 - 1e-12);
        for &l in &report.lambda {
            prop_assert!(l >= -1e-10);
        }
    }

    #[test]
    fn full_batch_minibatch_is_plain_gd(inst in instance(), s in 1usize..=6, target in 0.05f64..0.95) {
        let ds = build(&inst);
        let eta = eta_for(&ds, target);
        let c = ds.client(0);
        let phi = c.features().unwrap();
        let theta0 = DVector::from_element(inst.dim, 0.3);
        let batched = fedavg_local_update(&theta0, phi, c.responses(), eta, s, c.len()).unwrap();
        let mut gd = theta0.clone();
        for _ in 0..s {
            gd = local_gd_step(&gd, phi, c.responses(), eta).unwrap();
        }
        prop_assert!((&batched - &gd).amax() <= 1e-12 * scale(&gd));
    }

    #[test]
    fn single_step_fedavg_is_centralized_gd(inst in instance(), target in 0.05f64..0.95) {
        let ds = build(&inst);
        let eta = eta_for(&ds, target);
        let cfg = AlgorithmConfig::fedavg(1, eta, 1);
        let theta = DVector::from_fn(inst.dim, |k, _| 0.1 * k as f64 - 0.2);
        let next = run_round_primal(&ModelState { round: 0, params: Params::Primal(theta.clone()) }, &ds, &cfg).unwrap();
        let phi = ds.stacked_features().unwrap();
        let grad = phi.transpose() * (&phi * &theta - ds.stacked_responses()) / ds.total() as f64;
        let central = &theta - grad * eta;
        prop_assert!((next.theta().unwrap() - &central).amax() <= 1e-12 * scale(&central));
    }

    #[test]
    fn prox_step_is_stationary(inst in instance(), eta in 0.01f64..20.0) {
        let ds = build(&inst);
        let c = ds.client(0);
        let phi = c.features().unwrap();
        let prev = DVector::from_element(inst.dim, -0.4);
        let t = fedprox_local_update(&prev, phi, c.responses(), eta).unwrap();
        let n = c.len() as f64;
        let grad = phi.transpose() * (phi * &t - c.responses()) / n + (&t - &prev) / eta;
        prop_assert!(grad.amax() <= 1e-9 * scale(&t));
    }

    #[test]
    fn consistent_data_is_a_fixed_point(inst in instance(), alg in algorithms(), target in 0.05f64..0.95) {
        // Every client noise-free on one model: that model is a fixed point.
        let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ 1);
        let theta = DVector::from_fn(inst.dim, |_, _| rng.random_range(-1.0..1.0));
        let clients = inst.sizes.iter().map(|&n| {
            let x = DMatrix::from_fn(n, inst.dim, |_, _| rng.random_range(-1.0..1.0));
            let y = &x * &theta;
            ClientData::new(x, y)
        }).collect();
        let ds = FederatedDataset::new(KernelSpec::Linear { dim: inst.dim }, clients, 0.0).unwrap();
        let cfg = AlgorithmConfig::new(alg, eta_for(&ds, target), 1);
        let next = run_round_primal(&ModelState { round: 0, params: Params::Primal(theta.clone()) }, &ds, &cfg).unwrap();
        prop_assert!((next.theta().unwrap() - &theta).amax() <= 1e-12);
    }

    #[test]
    fn aggregation_is_a_convex_combination(inst in instance()) {
        let ds = build(&inst);
        let w = ds.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let v = DVector::from_element(inst.dim, 2.5);
        let same = vec![v.clone(); w.len()];
        prop_assert!((aggregate(&same, &w).unwrap() - &v).amax() <= 1e-12);
    }

    #[test]
    fn partition_tiles_the_range(n in 0usize..200, b in 1usize..50) {
        let parts = partition(n, b);
        let mut next = 0;
        for (k, r) in parts.iter().enumerate() {
            prop_assert_eq!(r.start, next);
            prop_assert!(r.len() == b || (k + 1 == parts.len() && r.len() <= b && !r.is_empty()));
            next = r.end;
        }
        prop_assert_eq!(next, n);
    }

    #[test]
    fn estimation_error_is_a_metric(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        c in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let (a, b, c) = (DVector::from_vec(a), DVector::from_vec(b), DVector::from_vec(c));
        let ab = estimation_error(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(estimation_error(&a, &a).unwrap(), 0.0);
        prop_assert!((ab - estimation_error(&b, &a).unwrap()).abs() <= 1e-12);
        let via = estimation_error(&a, &c).unwrap() + estimation_error(&c, &b).unwrap();
        prop_assert!(ab <= via + 1e-12);
    }

    #[test]
    fn min_norm_solution_lies_in_the_row_space(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), rank_cut in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        // Zero some columns to force a null space.
        for k in 0..rank_cut.min(cols) {
            x.column_mut(k).fill(0.0);
        }
        let y = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let t = min_norm_least_squares(&x, &y).unwrap();
        let basis = row_space_basis(&x);
        let mut rest = t.clone();
        for q in &basis {
            rest -= q * q.dot(&t);
        }
        prop_assert!(rest.amax() <= 1e-8);
        // Normal equations.
        let resid = x.transpose() * (&x * &t - &y);
        prop_assert!(resid.amax() <= 1e-8);
    }

    #[test]
    fn gain_ignores_trial_order(pairs in prop::collection::vec((0.0f64..10.0, 0.01f64..10.0), 1..30), rot in 0usize..30) {
        let mut fwd = GainAccumulator::default();
        for &(l, f) in &pairs {
            fwd.add(l, f);
        }
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        rotated.reverse();
        let mut back = GainAccumulator::default();
        for &(l, f) in &rotated {
            back.add(l, f);
        }
        for s in [GainScale::Squared, GainScale::Norm] {
            let (g1, g2) = (fwd.gain(s).unwrap(), back.gain(s).unwrap());
            prop_assert!((g1 - g2).abs() <= 1e-12 * g1.max(1.0));
        }
    }

    #[test]
    fn gram_matrices_are_symmetric_psd(n in 1usize..10, seed in any::<u64>(), bandwidth in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let rbf = KernelSpec::Implicit(ImplicitKernel::new("rbf", 2, move |x: &[f64], z: &[f64]| {
            let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
            (-d2 / (2.0 * bandwidth * bandwidth)).exp()
        }));
        for spec in [KernelSpec::Linear { dim: 2 }, rbf] {
            let g = kernel::gram(&spec, &pts).unwrap();
            let k = g.normalized();
            prop_assert!((&k - k.transpose()).amax() <= 1e-14);
            prop_assert!((g.unnormalized() / n as f64 - &k).amax() <= 1e-14);
            let eig = k.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&l| l >= -1e-10), "{eig:?}");
        }
        let lin = kernel::unnormalized_gram(&KernelSpec::Linear { dim: 2 }, &pts).unwrap();
        prop_assert!((lin - &pts * pts.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn kappa_is_one_at_one_step_and_grows_with_steps(gamma in 0.0f64..0.99) {
        let k1 = spectral::kappa(gamma, Algorithm::FedAvg { local_steps: 1 }).unwrap();
        prop_assert!((k1 - 1.0).abs() <= 1e-12);
        let mut prev = k1;
        for s in 2..=10 {
            let k = spectral::kappa(gamma, Algorithm::FedAvg { local_steps: s }).unwrap();
            prop_assert!(k >= prev - 1e-12);
            prev = k;
        }
        prop_assert!((spectral::kappa(gamma, Algorithm::FedProx).unwrap() - 1.0 - gamma).abs() <= 1e-15);
    }

    #[test]
    fn early_stopping_time_shrinks_with_noise(lambda in prop::collection::vec(0.0f64..2.0, 1..20), sigma in 0.05f64..2.0) {
        let n = lambda.len();
        let lo = spectral::early_stopping_time(&lambda, n, 0.1, 1, sigma * 2.0);
        let hi = spectral::early_stopping_time(&lambda, n, 0.1, 1, sigma);
        prop_assert!(lo.t <= hi.t);
    }
}

#[test]
fn implicit_linear_kernel_trains_like_the_feature_map() {
    // The dual path on an implicit dot-product kernel reproduces the primal
    // predictions of the linear feature map.
    let ds = build(&Instance {
        sizes: vec![4, 6, 3],
        dim: 3,
        seed: 9,
    });
    let implicit = KernelSpec::Implicit(ImplicitKernel::new("dot", 3, |x: &[f64], z: &[f64]| {
        x.iter().zip(z).map(|(a, b)| a * b).sum()
    }));
    let clients = ds
        .clients()
        .iter()
        .map(|c| ClientData::new(c.covariates().clone(), c.responses().clone()))
        .collect();
    let dual_ds = FederatedDataset::new(implicit, clients, ds.sigma()).unwrap();
    for alg in [Algorithm::FedAvg { local_steps: 3 }, Algorithm::FedProx] {
        let cfg = AlgorithmConfig::new(alg, eta_for(&ds, 0.5), 30);
        let p = run_training(&ds, &cfg, 0, None).unwrap();
        let d = run_training(&dual_ds, &cfg, 0, None).unwrap();
        let fp = p.predictions(30, &ds).unwrap();
        let fd = d.predictions(30, &dual_ds).unwrap();
        assert!((&fp - &fd).amax() < 1e-9, "{alg:?}");
    }
}
