//! Experiment configuration files.
//!
//! The format is flat `key = value` TOML (JSON with the same keys is also
//! accepted). Every key except `experiment` is optional; missing keys take the
//! experiment's defaults. Unknown keys are rejected.
//!
//! ```toml
//! experiment = "fg-vs-gamma"   # see `fedkernel list`
//! seed = 7
//! trials = 20
//! clients = 20                 # M
//! dim = 100                    # d
//! sizes = "10x50,10x500"       # n_i: an integer, an array, or "<count>x<n>,..."
//! sigma = 0.5
//! eta = 0.1
//! rounds = 2000
//! algorithms = ["fedavg:1", "fedavg:5", "fedavg:10", "fedprox"]
//! gammas = [0.0, 0.3, 7.5]     # fg-vs-gamma sweep
//! ranks = [10, 20, 30]         # fg-vs-subspace-r sweep
//! batch_sizes = [20, 50, 100]  # minibatch-sweep
//! local_sizes = [1, 2, 3]      # chebyshev-rate sweep over n_i
//! layout = "anchored"          # or "symmetric"
//! gain = "norm"                # or "squared"
//! early_stop = false
//! mc_samples = 100000
//! out = "runs/fg"
//! dump_datasets = false
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentId;
use crate::datagen::Layout;
use crate::engine::Algorithm;
use crate::error::{Error, Result};
use crate::metrics::GainScale;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum SizesValue {
    One(usize),
    List(Vec<usize>),
    Text(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: String,
    seed: Option<u64>,
    trials: Option<usize>,
    clients: Option<usize>,
    dim: Option<usize>,
    sizes: Option<SizesValue>,
    sigma: Option<f64>,
    eta: Option<f64>,
    rounds: Option<usize>,
    algorithms: Option<Vec<String>>,
    gammas: Option<Vec<f64>>,
    ranks: Option<Vec<usize>>,
    batch_sizes: Option<Vec<usize>>,
    local_sizes: Option<Vec<usize>>,
    layout: Option<Layout>,
    gain: Option<GainScale>,
    early_stop: Option<bool>,
    mc_samples: Option<usize>,
    out: Option<PathBuf>,
    dump_datasets: Option<bool>,
}

/// A fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub trials: usize,
    /// Client sizes `n_i`; the client count is its length. Unused by
    /// `chebyshev-rate`, which sweeps `local_sizes` over `clients` clients.
    pub sizes: Vec<usize>,
    pub clients: usize,
    pub dim: usize,
    pub sigma: f64,
    pub eta: f64,
    pub rounds: usize,
    #[serde(serialize_with = "ser_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub gammas: Vec<f64>,
    pub ranks: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub local_sizes: Vec<usize>,
    pub layout: Layout,
    pub gain: GainScale,
    pub early_stop: bool,
    pub mc_samples: usize,
    pub out: Option<PathBuf>,
    pub dump_datasets: bool,
}

fn ser_algorithms<S: serde::Serializer>(a: &[Algorithm], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(a.iter().map(|x| x.to_string()))
}

/// Parses `"10x50,10x500"`, `"500"` or `"50,50,500"`.
pub fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::config(format!("bad sizes entry {part:?}"));
        match part.split_once(['x', 'X']) {
            Some((count, n)) => {
                let count: usize = count.trim().parse().map_err(|_| bad())?;
                let n: usize = n.trim().parse().map_err(|_| bad())?;
                out.extend(std::iter::repeat_n(n, count));
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(Error::config("sizes must name at least one client"));
    }
    Ok(out)
}

const DEFAULT_ALGORITHMS: [Algorithm; 4] = [
    Algorithm::FedAvg { local_steps: 1 },
    Algorithm::FedAvg { local_steps: 5 },
    Algorithm::FedAvg { local_steps: 10 },
    Algorithm::FedProx,
];

/// Experiment defaults before any file overrides.
pub fn defaults(experiment: ExperimentId) -> ExperimentConfig {
    let base = ExperimentConfig {
        experiment,
        seed: 0,
        trials: 20,
        sizes: vec![500; 25],
        clients: 25,
        dim: 100,
        sigma: 0.5,
        eta: 0.1,
        rounds: 1000,
        algorithms: DEFAULT_ALGORITHMS.to_vec(),
        gammas: Vec::new(),
        ranks: Vec::new(),
        batch_sizes: Vec::new(),
        local_sizes: Vec::new(),
        layout: Layout::Anchored,
        gain: GainScale::Norm,
        early_stop: false,
        mc_samples: crate::metrics::MC_SAMPLES,
        out: None,
        dump_datasets: false,
    };
    let split = crate::datagen::split_sizes(20, 50, 500);
    match experiment {
        ExperimentId::FigGradVsRounds | ExperimentId::FigErrVsRounds => base,
        ExperimentId::MinibatchSweep => ExperimentConfig {
            trials: 5,
            batch_sizes: vec![20, 50, 100],
            ..base
        },
        ExperimentId::FgVsGamma => ExperimentConfig {
            sizes: split,
            clients: 20,
            rounds: 2000,
            gammas: vec![
                0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.75, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 7.5,
                8.0, 9.0, 10.0, 12.0, 15.0, 20.0,
            ],
            ..base
        },
        ExperimentId::FgVsSubspaceR => ExperimentConfig {
            sizes: split,
            clients: 20,
            rounds: 2000,
            ranks: vec![
                1, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 23, 26, 30, 35, 40, 50, 60, 70, 80, 90, 100,
            ],
            ..base
        },
        ExperimentId::ChebyshevRate => ExperimentConfig {
            trials: 500,
            sizes: vec![1; 20],
            clients: 20,
            dim: 6,
            rounds: 100_000,
            local_sizes: (1..=10).collect(),
            ..base
        },
        ExperimentId::TheoryCheckSuite => ExperimentConfig {
            trials: 1,
            sizes: vec![10; 3],
            clients: 3,
            dim: 5,
            rounds: 20,
            ..base
        },
    }
}

impl ExperimentConfig {
    /// Parses a TOML or JSON document.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let raw: RawConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?
        };
        Self::from_raw(raw)
    }

    /// Reads a config file; `.json` files are parsed as JSON, anything else
    /// as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let experiment: ExperimentId = raw.experiment.parse()?;
        let mut c = defaults(experiment);
        if let Some(v) = raw.seed {
            c.seed = v;
        }
        if let Some(v) = raw.trials {
            c.trials = v;
        }
        if let Some(v) = raw.dim {
            c.dim = v;
        }
        if let Some(v) = raw.sigma {
            c.sigma = v;
        }
        if let Some(v) = raw.eta {
            c.eta = v;
        }
        if let Some(v) = raw.rounds {
            c.rounds = v;
        }
        if let Some(v) = raw.algorithms {
            c.algorithms = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = raw.gammas {
            c.gammas = v;
        }
        if let Some(v) = raw.ranks {
            c.ranks = v;
        }
        if let Some(v) = raw.batch_sizes {
            c.batch_sizes = v;
        }
        if let Some(v) = raw.local_sizes {
            c.local_sizes = v;
        }
        if let Some(v) = raw.layout {
            c.layout = v;
        }
        if let Some(v) = raw.gain {
            c.gain = v;
        }
        if let Some(v) = raw.early_stop {
            c.early_stop = v;
        }
        if let Some(v) = raw.mc_samples {
            c.mc_samples = v;
        }
        if let Some(v) = raw.dump_datasets {
            c.dump_datasets = v;
        }
        c.out = raw.out;
        match (raw.sizes, raw.clients) {
            (Some(SizesValue::One(n)), m) => {
                c.clients = m.unwrap_or(c.clients);
                c.sizes = vec![n; c.clients];
            }
            (Some(SizesValue::List(v)), m) => {
                if m.is_some_and(|m| m != v.len()) {
                    return Err(Error::config("clients disagrees with the length of sizes"));
                }
                c.clients = v.len();
                c.sizes = v;
            }
            (Some(SizesValue::Text(t)), m) => {
                let v = parse_sizes(&t)?;
                if m.is_some_and(|m| m != v.len()) {
                    return Err(Error::config("clients disagrees with the length of sizes"));
                }
                c.clients = v.len();
                c.sizes = v;
            }
            (None, Some(m)) => {
                // Keep the default layout (uniform or scarce/rich split) at the new count.
                let uniform = c.sizes.iter().all(|&n| n == c.sizes[0]);
                c.sizes = if uniform {
                    vec![c.sizes[0]; m]
                } else {
                    crate::datagen::split_sizes(m, 50, 500)
                };
                c.clients = m;
            }
            (None, None) => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.clients == 0 || self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::config("every client needs at least one sample"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.algorithms.is_empty() {
            return Err(Error::config("at least one algorithm is required"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be positive"));
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config("heterogeneity levels must be finite and >= 0"));
        }
        if self.ranks.iter().any(|&r| r == 0 || r > self.dim) {
            return Err(Error::config(format!("ranks must lie in 1..={}", self.dim)));
        }
        let min_n = self.sizes.iter().copied().min().unwrap_or(0);
        if let Some(b) = self.batch_sizes.iter().find(|&&b| b == 0 || b > min_n) {
            return Err(Error::config(format!(
                "batch size {b} is outside 1..={min_n} (smallest client)"
            )));
        }
        if self.local_sizes.contains(&0) {
            return Err(Error::config("local_sizes entries must be positive"));
        }
        let needs = |v: bool, what: &str| {
            if v {
                Err(Error::config(format!(
                    "{} needs a non-empty {what}",
                    self.experiment
                )))
            } else {
                Ok(())
            }
        };
        match self.experiment {
            ExperimentId::FgVsGamma => needs(self.gammas.is_empty(), "gammas")?,
            ExperimentId::FgVsSubspaceR => needs(self.ranks.is_empty(), "ranks")?,
            ExperimentId::MinibatchSweep => needs(self.batch_sizes.is_empty(), "batch_sizes")?,
            ExperimentId::ChebyshevRate => needs(self.local_sizes.is_empty(), "local_sizes")?,
            _ => {}
        }
        if matches!(
            self.experiment,
            ExperimentId::FgVsGamma | ExperimentId::FgVsSubspaceR
        ) && self.clients < 2
        {
            return Err(Error::config(
                "federation-gain experiments need at least two clients",
            ));
        }
        Ok(())
    }
}
