//! Federated optimizers.
//!
//! Three equivalent views of a round are provided:
//!
//! * [`primal`]: each client runs its local update on `theta` and the server
//!   averages, exactly as a deployment would.
//! * [`dual`]: the in-sample prediction recursion
//!   `f_t(x) = (I - eta K_x P) f_{t-1}(x) + eta K_x P y`, carried as weights
//!   `alpha` over all training points so the model stays evaluable anywhere:
//!   `f(z) = f_0(z) + sum_j alpha_j k(z, x_j)` and
//!   `alpha <- alpha + (eta / N) P^T (y - f(x))`.
//! * [`compiled`]: for finite-rank kernels a full-batch round is the affine
//!   map `theta <- A theta + Psi y`, which allows jumping many rounds at once.

pub mod compiled;
pub mod dual;
pub mod primal;
mod training;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::FederatedDataset;
use crate::error::{Error, Result};

pub use compiled::AffineRound;
pub use dual::{build_dual_operator, run_round_dual, DualModel, DualOperator};
pub use primal::{
    aggregate, fedavg_local_update, fedprox_local_update, local_gd_step, partition, run_round_primal,
    PrimalSimulator,
};
pub use training::{run_training, ModelState, Params, RoundTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    FedAvg { local_steps: usize },
    FedProx,
}

impl Algorithm {
    /// Local steps per round; FedProx counts as one.
    pub fn local_steps(&self) -> usize {
        match self {
            Algorithm::FedAvg { local_steps } => *local_steps,
            Algorithm::FedProx => 1,
        }
    }

    pub fn is_prox(&self) -> bool {
        matches!(self, Algorithm::FedProx)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::FedAvg { local_steps } => write!(f, "fedavg:{local_steps}"),
            Algorithm::FedProx => write!(f, "fedprox"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    /// Accepts `fedavg:<s>`, `fedavg` (s = 1) and `fedprox`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "fedprox" {
            return Ok(Algorithm::FedProx);
        }
        if t == "fedavg" {
            return Ok(Algorithm::FedAvg { local_steps: 1 });
        }
        if let Some(rest) = t.strip_prefix("fedavg:") {
            let steps: usize = rest
                .parse()
                .map_err(|_| Error::config(format!("bad local step count in {s:?}")))?;
            if steps == 0 {
                return Err(Error::config("FedAvg needs at least one local step"));
            }
            return Ok(Algorithm::FedAvg { local_steps: steps });
        }
        Err(Error::config(format!(
            "unknown algorithm {s:?} (expected fedavg:<s> or fedprox)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub algorithm: Algorithm,
    /// Step size; for FedProx the proximal weight.
    pub eta: f64,
    /// Minibatch size per client; `None` means full batch.
    pub batch_size: Option<usize>,
    pub max_rounds: usize,
    /// Stop at the early-stopping time when it is smaller than `max_rounds`.
    pub early_stop: bool,
    /// Initial coefficients `theta_0`; zero when absent.
    pub init: Option<DVector<f64>>,
}

impl AlgorithmConfig {
    pub fn new(algorithm: Algorithm, eta: f64, max_rounds: usize) -> Self {
        AlgorithmConfig {
            algorithm,
            eta,
            batch_size: None,
            max_rounds,
            early_stop: false,
            init: None,
        }
    }

    pub fn fedavg(local_steps: usize, eta: f64, max_rounds: usize) -> Self {
        Self::new(Algorithm::FedAvg { local_steps }, eta, max_rounds)
    }

    pub fn fedprox(eta: f64, max_rounds: usize) -> Self {
        Self::new(Algorithm::FedProx, eta, max_rounds)
    }

    pub fn with_batch_size(mut self, b: usize) -> Self {
        self.batch_size = Some(b);
        self
    }

    pub fn local_steps(&self) -> usize {
        self.algorithm.local_steps()
    }

    /// Checks the config on its own.
    pub fn validate(&self) -> Result<()> {
        if let Algorithm::FedAvg { local_steps: 0 } = self.algorithm {
            return Err(Error::config("FedAvg needs at least one local step"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Checks the config against a dataset.
    pub fn validate_for(&self, ds: &FederatedDataset) -> Result<()> {
        self.validate()?;
        if let Some(b) = self.batch_size {
            let min_n = ds.sizes().into_iter().min().unwrap_or(0);
            if b > min_n {
                return Err(Error::config(format!(
                    "batch size {b} exceeds the smallest client size {min_n}"
                )));
            }
        }
        if let (Some(t), Some(d)) = (&self.init, ds.feature_dim()) {
            if t.len() != d {
                return Err(Error::shape(format!(
                    "initial model has length {}, feature dimension is {d}",
                    t.len()
                )));
            }
        }
        Ok(())
    }

    /// Batch size for a client of size `n`: `n` when running full batch.
    pub fn batch_for(&self, n: usize) -> usize {
        self.batch_size.map_or(n, |b| b.min(n))
    }

    pub fn is_full_batch(&self, ds: &FederatedDataset) -> bool {
        self.batch_size.is_none_or(|b| ds.sizes().iter().all(|&n| b >= n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_round_trips_through_strings() {
        for a in [
            Algorithm::FedAvg { local_steps: 1 },
            Algorithm::FedAvg { local_steps: 10 },
            Algorithm::FedProx,
        ] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedavg:0".parse::<Algorithm>().is_err());
        assert!("sgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlgorithmConfig::fedavg(1, 0.0, 10).validate().is_err());
        assert!(AlgorithmConfig::fedavg(0, 0.1, 10).validate().is_err());
        assert!(AlgorithmConfig::fedprox(0.1, 10)
            .with_batch_size(0)
            .validate()
            .is_err());
        assert!(AlgorithmConfig::fedprox(0.1, 10).validate().is_ok());
    }
}
