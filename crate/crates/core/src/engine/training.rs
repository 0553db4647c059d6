use nalgebra::DVector;

use super::dual::{build_dual_operator, run_round_dual, DualOperator};
use super::primal::PrimalSimulator;
use super::AlgorithmConfig;
use crate::dataset::FederatedDataset;
use crate::error::{Error, Result};
use crate::spectral;

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    /// Coefficients `theta` of `f = phi . theta`.
    Primal(DVector<f64>),
    /// Weights `alpha` over the stacked training points.
    Dual(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub round: usize,
    pub params: Params,
}

impl ModelState {
    pub fn theta(&self) -> Option<&DVector<f64>> {
        match &self.params {
            Params::Primal(t) => Some(t),
            Params::Dual(_) => None,
        }
    }
}

/// Every state from round 0 to the stop round.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub states: Vec<ModelState>,
    /// Early-stopping time used to cut the run, when one was applied.
    pub early_stop: Option<spectral::EarlyStopping>,
    dual: Option<DualOperator>,
}

impl RoundTrace {
    pub fn rounds(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &ModelState {
        self.states.last().expect("trace always holds round 0")
    }

    /// In-sample predictions `f_t(x)` over the stacked covariates.
    pub fn predictions(&self, t: usize, ds: &FederatedDataset) -> Result<DVector<f64>> {
        let s = self
            .states
            .get(t)
            .ok_or_else(|| Error::config(format!("round {t} is past the end of the trace")))?;
        match (&s.params, &self.dual) {
            (Params::Primal(theta), _) => Ok(ds.stacked_features()? * theta),
            (Params::Dual(alpha), Some(op)) => Ok(op.predictions(alpha)),
            (Params::Dual(_), None) => Err(Error::config("dual trace without its operator")),
        }
    }
}

/// Trains from `config.init` (zero by default) for `stop_time` rounds, or
/// `max_rounds`, or the early-stopping time when `config.early_stop` is set;
/// whichever is smallest. Finite-rank kernels run the primal simulation,
/// others the dual recursion. `seed` only drives minibatch ordering. FedAvg
/// with `gamma >= 1` is rejected.
pub fn run_training(
    ds: &FederatedDataset,
    config: &AlgorithmConfig,
    seed: u64,
    stop_time: Option<usize>,
) -> Result<RoundTrace> {
    config.validate_for(ds)?;
    if !config.algorithm.is_prox() {
        spectral::check_stability(ds, config)?;
    }
    let mut rounds = config.max_rounds;
    if let Some(t) = stop_time {
        rounds = rounds.min(t);
    }
    let mut early_stop = None;
    if config.early_stop && stop_time.is_none() {
        let es = spectral::early_stopping_for(ds, config)?;
        rounds = rounds.min(es.t);
        early_stop = Some(es);
    }
    if ds.kernel().has_feature_map() {
        let mut sim = PrimalSimulator::new(ds, config, seed)?;
        let mut states = Vec::with_capacity(rounds + 1);
        states.push(sim.state());
        for _ in 0..rounds {
            sim.step(ds)?;
            states.push(sim.state());
        }
        return Ok(RoundTrace {
            states,
            early_stop,
            dual: None,
        });
    }
    if config.batch_size.is_some() && !config.is_full_batch(ds) {
        return Err(Error::UnsupportedRepresentation(
            "minibatch training needs a finite-rank feature map".into(),
        ));
    }
    let op = build_dual_operator(ds, config)?;
    let mut alpha = DVector::zeros(ds.total());
    let mut states = Vec::with_capacity(rounds + 1);
    states.push(ModelState {
        round: 0,
        params: Params::Dual(alpha.clone()),
    });
    for t in 1..=rounds {
        alpha = run_round_dual(&alpha, ds, &op, config.eta)?;
        states.push(ModelState {
            round: t,
            params: Params::Dual(alpha.clone()),
        });
    }
    Ok(RoundTrace {
        states,
        early_stop,
        dual: Some(op),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClientData;
    use crate::kernel::{ImplicitKernel, KernelSpec};
    use nalgebra::DMatrix;

    fn homogeneous() -> FederatedDataset {
        let theta = DVector::from_vec(vec![1.0, -2.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, -0.3, 0.2]);
        let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.9, 1.0, 1.0]);
        let ya = &a * &theta;
        let yb = &b * &theta;
        FederatedDataset::new(
            KernelSpec::Linear { dim: 2 },
            vec![
                ClientData::new(a, ya).with_true_theta(theta.clone()),
                ClientData::new(b, yb).with_true_theta(theta.clone()),
            ],
            0.0,
        )
        .unwrap()
        .with_theta_star(theta)
    }

    #[test]
    fn zero_rounds_keeps_only_initial_state() {
        let tr = run_training(&homogeneous(), &AlgorithmConfig::fedavg(2, 0.5, 0), 1, None).unwrap();
        assert_eq!(tr.states.len(), 1);
        assert_eq!(tr.rounds(), 0);
    }

    #[test]
    fn converges_on_noise_free_data() {
        let ds = homogeneous();
        for cfg in [
            AlgorithmConfig::fedavg(1, 0.5, 3000),
            AlgorithmConfig::fedavg(5, 0.5, 3000),
            AlgorithmConfig::fedprox(0.5, 3000),
        ] {
            let tr = run_training(&ds, &cfg, 3, None).unwrap();
            let err = (tr.last().theta().unwrap() - ds.theta_star().unwrap()).norm();
            assert!(err <= 1e-6, "{:?}: {err}", cfg.algorithm);
            assert_eq!(tr.rounds(), 3000);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let ds = homogeneous();
        let cfg = AlgorithmConfig::fedavg(3, 0.3, 25).with_batch_size(1);
        let a = run_training(&ds, &cfg, 11, None).unwrap();
        let b = run_training(&ds, &cfg, 11, None).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn implicit_kernels_train_in_the_dual() {
        let k = KernelSpec::Implicit(ImplicitKernel::new("lin", 2, |x, z| x[0] * z[0] + x[1] * z[1]));
        let lin = homogeneous();
        let clients = lin
            .clients()
            .iter()
            .map(|c| ClientData::new(c.covariates().clone(), c.responses().clone()))
            .collect();
        let ds = FederatedDataset::new(k, clients, 0.0).unwrap();
        let cfg = AlgorithmConfig::fedavg(1, 0.5, 10);
        let dual = run_training(&ds, &cfg, 0, None).unwrap();
        let primal = run_training(&lin, &cfg, 0, None).unwrap();
        for t in 0..=10 {
            let a = dual.predictions(t, &ds).unwrap();
            let b = primal.predictions(t, &lin).unwrap();
            assert!((a - b).amax() < 1e-12);
        }
    }
}
