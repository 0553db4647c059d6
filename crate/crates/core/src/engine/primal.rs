//! Literal per-client simulation in coefficient space.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::training::{ModelState, Params};
use super::{Algorithm, AlgorithmConfig};
use crate::dataset::FederatedDataset;
use crate::error::{Error, Result};

fn check_client(theta: &DVector<f64>, phi: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if phi.ncols() != theta.len() {
        return Err(Error::shape(format!(
            "features have {} columns, model has length {}",
            phi.ncols(),
            theta.len()
        )));
    }
    if phi.nrows() != y.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} responses",
            phi.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("client without samples"));
    }
    Ok(())
}

/// Splits `0..n` into consecutive batches of size `b`; the last one may be
/// shorter.
pub fn partition(n: usize, b: usize) -> Vec<Range<usize>> {
    let b = b.max(1);
    (0..n).step_by(b).map(|lo| lo..(lo + b).min(n)).collect()
}

/// One gradient step on the rows `rows` of `(phi, y)`, in place.
fn gd_step_rows(
    theta: &mut DVector<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    rows: Range<usize>,
    eta: f64,
    resid: &mut DVector<f64>,
) {
    let m = rows.len();
    let pb = phi.rows(rows.start, m);
    let mut r = resid.rows_mut(0, m);
    r.copy_from(&y.rows(rows.start, m));
    // r = Phi_b theta - y_b
    r.gemv(1.0, &pb, theta, -1.0);
    theta.gemv_tr(-eta / m as f64, &pb, &r, 1.0);
}

/// `theta - (eta / n) Phi^T (Phi theta - y)`.
pub fn local_gd_step(
    theta: &DVector<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    check_client(theta, phi, y)?;
    let mut out = theta.clone();
    let mut resid = DVector::zeros(y.len());
    gd_step_rows(&mut out, phi, y, 0..y.len(), eta, &mut resid);
    Ok(out)
}

fn fedavg_ordered(
    theta: &mut DVector<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
    steps: usize,
    batches: &[Range<usize>],
    order: &[usize],
    resid: &mut DVector<f64>,
) {
    for _ in 0..steps {
        for &k in order {
            gd_step_rows(theta, phi, y, batches[k].clone(), eta, resid);
        }
    }
}

/// `s` passes over the client's minibatches (a single batch when
/// `batch_size == n`), one gradient step per batch, batches in natural order.
pub fn fedavg_local_update(
    theta: &DVector<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
    steps: usize,
    batch_size: usize,
) -> Result<DVector<f64>> {
    check_client(theta, phi, y)?;
    let n = y.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!(
            "batch size {batch_size} is outside 1..={n}"
        )));
    }
    let batches = partition(n, batch_size);
    let order: Vec<usize> = (0..batches.len()).collect();
    let mut out = theta.clone();
    let mut resid = DVector::zeros(batch_size);
    fedavg_ordered(&mut out, phi, y, eta, steps, &batches, &order, &mut resid);
    Ok(out)
}

/// Exact proximal step:
/// `argmin (1/2n) ||Phi theta - y||^2 + (1/2 eta) ||theta - theta_prev||^2`.
pub fn fedprox_local_update(
    theta_prev: &DVector<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    check_client(theta_prev, phi, y)?;
    let c = eta / y.len() as f64;
    let d = theta_prev.len();
    let mut m = phi.tr_mul(phi) * c;
    for k in 0..d {
        m[(k, k)] += 1.0;
    }
    let rhs = theta_prev + phi.tr_mul(y) * c;
    crate::linalg::spd_solve(m, &rhs)
}

/// `sum_i w_i theta_i`, summed in client order.
pub fn aggregate(updates: &[DVector<f64>], weights: &[f64]) -> Result<DVector<f64>> {
    if updates.is_empty() {
        return Err(Error::EmptyInput("nothing to aggregate"));
    }
    if updates.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::config(format!(
            "aggregation weights sum to {total}, not 1"
        )));
    }
    let d = updates[0].len();
    let mut out = DVector::zeros(d);
    for (u, &w) in updates.iter().zip(weights) {
        if u.len() != d {
            return Err(Error::shape(format!(
                "update of length {} among updates of length {d}",
                u.len()
            )));
        }
        out.axpy(w, u, 1.0);
    }
    Ok(out)
}

/// One full round from a primal state, batches in natural order.
pub fn run_round_primal(
    state: &ModelState,
    ds: &FederatedDataset,
    config: &AlgorithmConfig,
) -> Result<ModelState> {
    let theta = match &state.params {
        Params::Primal(t) => t,
        Params::Dual(_) => {
            return Err(Error::UnsupportedRepresentation(
                "run_round_primal needs a primal state".into(),
            ))
        }
    };
    config.validate_for(ds)?;
    let mut updates = Vec::with_capacity(ds.num_clients());
    for c in ds.clients() {
        let phi = c.features()?;
        let b = config.batch_for(c.len());
        let u = match config.algorithm {
            Algorithm::FedAvg { local_steps } => {
                fedavg_local_update(theta, phi, c.responses(), config.eta, local_steps, b)?
            }
            Algorithm::FedProx if b == c.len() => {
                fedprox_local_update(theta, phi, c.responses(), config.eta)?
            }
            Algorithm::FedProx => {
                let mut t = theta.clone();
                for r in partition(c.len(), b) {
                    let pb = phi.rows(r.start, r.len()).into_owned();
                    let yb = c.responses().rows(r.start, r.len()).into_owned();
                    t = fedprox_local_update(&t, &pb, &yb, config.eta)?;
                }
                t
            }
        };
        updates.push(u);
    }
    Ok(ModelState {
        round: state.round + 1,
        params: Params::Primal(aggregate(&updates, &ds.weights())?),
    })
}

/// Cached factorization of one proximal system.
#[derive(Debug, Clone)]
enum ProxFactor {
    /// `(I_d + (eta/m) Phi_b^T Phi_b)`, used when `d <= m`.
    Primal(Cholesky<f64, Dyn>),
    /// `(I_m + (eta/m) Phi_b Phi_b^T)`, used when `m < d`.
    Woodbury(Cholesky<f64, Dyn>),
}

impl ProxFactor {
    fn new(phi: &DMatrix<f64>, rows: &Range<usize>, eta: f64) -> Result<Self> {
        let m = rows.len();
        let d = phi.ncols();
        let pb = phi.rows(rows.start, m);
        let c = eta / m as f64;
        let (mut sys, woodbury) = if d <= m {
            (pb.tr_mul(&pb) * c, false)
        } else {
            (pb * pb.transpose() * c, true)
        };
        for k in 0..sys.nrows() {
            sys[(k, k)] += 1.0;
        }
        let chol = Cholesky::new(sys)
            .ok_or_else(|| Error::Numeric("proximal system is not positive definite".into()))?;
        Ok(if woodbury {
            ProxFactor::Woodbury(chol)
        } else {
            ProxFactor::Primal(chol)
        })
    }

    fn apply(
        &self,
        theta: &mut DVector<f64>,
        phi: &DMatrix<f64>,
        y: &DVector<f64>,
        rows: &Range<usize>,
        eta: f64,
    ) {
        let m = rows.len();
        let pb = phi.rows(rows.start, m);
        let yb = y.rows(rows.start, m);
        let c = eta / m as f64;
        match self {
            ProxFactor::Primal(chol) => {
                let mut rhs = theta.clone();
                rhs.gemv_tr(c, &pb, &yb, 1.0);
                *theta = chol.solve(&rhs);
            }
            ProxFactor::Woodbury(chol) => {
                // (I + c Phi_b Phi_b^T) u = c (y_b - Phi_b theta); theta += Phi_b^T u.
                let mut r = yb.into_owned();
                r.gemv(-c, &pb, theta, c);
                let u = chol.solve(&r);
                theta.gemv_tr(1.0, &pb, &u, 1.0);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ClientPlan {
    batches: Vec<Range<usize>>,
    prox: Vec<ProxFactor>,
}

/// Stateful primal simulation with cached per-batch factorizations.
///
/// With minibatching, each client visits its batches in an order drawn once
/// per round from `(seed, round, client)`; within the round all `s` passes
/// use that order. Full-batch rounds draw nothing.
#[derive(Debug, Clone)]
pub struct PrimalSimulator {
    config: AlgorithmConfig,
    plans: Vec<ClientPlan>,
    weights: Vec<f64>,
    seed: u64,
    theta: DVector<f64>,
    round: usize,
}

impl PrimalSimulator {
    pub fn new(ds: &FederatedDataset, config: &AlgorithmConfig, seed: u64) -> Result<Self> {
        config.validate_for(ds)?;
        let d = ds.feature_dim().ok_or_else(|| {
            Error::UnsupportedRepresentation("primal simulation needs a feature map".into())
        })?;
        let mut plans = Vec::with_capacity(ds.num_clients());
        for c in ds.clients() {
            let batches = partition(c.len(), config.batch_for(c.len()));
            let prox = if config.algorithm.is_prox() {
                let phi = c.features()?;
                batches
                    .iter()
                    .map(|r| ProxFactor::new(phi, r, config.eta))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            plans.push(ClientPlan { batches, prox });
        }
        Ok(PrimalSimulator {
            config: config.clone(),
            plans,
            weights: ds.weights(),
            seed,
            theta: config.init.clone().unwrap_or_else(|| DVector::zeros(d)),
            round: 0,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            round: self.round,
            params: Params::Primal(self.theta.clone()),
        }
    }

    fn batch_order(&self, client: usize, nbatches: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..nbatches).collect();
        if nbatches > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(((self.round as u64) << 24) | client as u64);
            order.shuffle(&mut rng);
        }
        order
    }

    fn local_update(&self, ds: &FederatedDataset, i: usize) -> Result<DVector<f64>> {
        let c = ds.client(i);
        let phi = c.features()?;
        let y = c.responses();
        let plan = &self.plans[i];
        let order = self.batch_order(i, plan.batches.len());
        let mut theta = self.theta.clone();
        match self.config.algorithm {
            Algorithm::FedAvg { local_steps } => {
                let mut resid = DVector::zeros(plan.batches[0].len());
                fedavg_ordered(
                    &mut theta,
                    phi,
                    y,
                    self.config.eta,
                    local_steps,
                    &plan.batches,
                    &order,
                    &mut resid,
                );
            }
            Algorithm::FedProx => {
                for &k in &order {
                    plan.prox[k].apply(&mut theta, phi, y, &plan.batches[k], self.config.eta);
                }
            }
        }
        Ok(theta)
    }

    /// Runs one round; `ds` must be the dataset the simulator was built for.
    pub fn step(&mut self, ds: &FederatedDataset) -> Result<()> {
        if ds.num_clients() != self.plans.len() {
            return Err(Error::shape("simulator was built for a different dataset"));
        }
        let updates = (0..ds.num_clients())
            .into_par_iter()
            .map(|i| self.local_update(ds, i))
            .collect::<Result<Vec<_>>>()?;
        self.theta = aggregate(&updates, &self.weights)?;
        self.round += 1;
        Ok(())
    }
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

    fn m(r: usize, c: usize, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, x)
    }

    #[test]
    fn gd_step_examples() {
        let t = local_gd_step(&v(&[0.0]), &m(1, 1, &[1.0]), &v(&[2.0]), 0.1).unwrap();
        assert_relative_eq!(t[0], 0.2, epsilon = 1e-15);
        let t = local_gd_step(
            &v(&[0.0, 0.0]),
            &m(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            &v(&[2.0, 4.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(t, v(&[1.0, 2.0]));
        let fixed = local_gd_step(&v(&[3.0]), &m(2, 1, &[1.0, 2.0]), &v(&[3.0, 6.0]), 0.4).unwrap();
        assert_eq!(fixed, v(&[3.0]));
        assert!(local_gd_step(&v(&[0.0]), &m(1, 2, &[1.0, 1.0]), &v(&[1.0]), 0.1).is_err());
    }

    #[test]
    fn fedavg_examples() {
        let phi = m(1, 1, &[1.0]);
        let y = v(&[2.0]);
        let one = fedavg_local_update(&v(&[0.0]), &phi, &y, 0.1, 1, 1).unwrap();
        assert_eq!(one, local_gd_step(&v(&[0.0]), &phi, &y, 0.1).unwrap());
        let two = fedavg_local_update(&v(&[0.0]), &phi, &y, 0.1, 2, 1).unwrap();
        assert_relative_eq!(two[0], 0.38, epsilon = 1e-15);
        assert!(matches!(
            fedavg_local_update(&v(&[0.0]), &phi, &y, 0.1, 1, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fedprox_examples() {
        let phi = m(1, 1, &[1.0]);
        let y = v(&[3.0]);
        assert_relative_eq!(
            fedprox_local_update(&v(&[0.0]), &phi, &y, 1.0).unwrap()[0],
            1.5,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            fedprox_local_update(&v(&[3.0]), &phi, &y, 1.0).unwrap()[0],
            3.0,
            epsilon = 1e-15
        );
        let t = fedprox_local_update(&v(&[0.7]), &phi, &y, 1e-9).unwrap();
        assert!((t[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(
            aggregate(&[v(&[0.0]), v(&[2.0])], &[0.5, 0.5]).unwrap(),
            v(&[1.0])
        );
        assert_relative_eq!(
            aggregate(&[v(&[10.0]), v(&[0.0])], &[0.9, 0.1]).unwrap()[0],
            9.0,
            epsilon = 1e-14
        );
        assert_eq!(aggregate(&[v(&[4.0, 5.0])], &[1.0]).unwrap(), v(&[4.0, 5.0]));
        assert!(matches!(
            aggregate(&[v(&[0.0]), v(&[2.0])], &[0.5, 0.6]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_example_two_scalar_clients() {
        let k = KernelSpec::Linear { dim: 1 };
        let clients = vec![
            ClientData::new(m(1, 1, &[1.0]), v(&[1.0])),
            ClientData::new(m(1, 1, &[1.0]), v(&[3.0])),
        ];
        let ds = FederatedDataset::new(k, clients, 0.0).unwrap();
        let cfg = AlgorithmConfig::fedavg(1, 0.5, 1);
        let s0 = ModelState {
            round: 0,
            params: Params::Primal(v(&[0.0])),
        };
        let s1 = run_round_primal(&s0, &ds, &cfg).unwrap();
        assert_eq!(s1.round, 1);
        assert_eq!(s1.params, Params::Primal(v(&[1.0])));
    }

    #[test]
    fn woodbury_matches_primal_solve() {
        let phi = DMatrix::from_fn(3, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
        let y = v(&[0.3, -1.0, 2.0]);
        let theta = v(&[0.1, 0.2, -0.3, 0.4, 0.0]);
        let direct = fedprox_local_update(&theta, &phi, &y, 0.7).unwrap();
        let f = ProxFactor::new(&phi, &(0..3), 0.7).unwrap();
        assert!(matches!(f, ProxFactor::Woodbury(_)));
        let mut t = theta.clone();
        f.apply(&mut t, &phi, &y, &(0..3), 0.7);
        assert_relative_eq!(t, direct, epsilon = 1e-12);
    }

    #[test]
    fn partition_handles_remainders() {
        assert_eq!(partition(5, 2), vec![0..2, 2..4, 4..5]);
        assert_eq!(partition(4, 4), vec![0..4]);
    }
}
