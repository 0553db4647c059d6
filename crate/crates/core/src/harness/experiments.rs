//! Runners for the registered experiments.
//!
//! Every trial draws its scenario from `split_seed(seed, trial)`; trials run
//! in parallel and are gathered in trial order, so the rows do not depend on
//! the worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::table::{MetricTrace, ResultRow, ResultTable, SummaryRow};
use super::ExperimentId;
use crate::datagen::{self, Family, Noise, ScenarioSpec};
use crate::dataset::FederatedDataset;
use crate::engine::{AffineRound, Algorithm, AlgorithmConfig, PrimalSimulator};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::{GainAccumulator, GradientOracle, MinNormSolver, PolynomialMse};
use crate::spectral;

pub const GRAD_NORM: &str = "grad_norm";
pub const EST_ERROR: &str = "est_error";
pub const MSE: &str = "mse";
pub const INV_MSE: &str = "inv_mse";
pub const FG_SCARCE: &str = "fg_scarce";
pub const FG_RICH: &str = "fg_rich";
const PROBE_METRICS: [&str; 4] = [
    "local_err_sq_scarce",
    "fed_err_sq_scarce",
    "local_err_sq_rich",
    "fed_err_sq_rich",
];

/// Scenario for trial `k` of a run.
pub fn trial_scenario(cfg: &ExperimentConfig, family: Family, k: usize) -> ScenarioSpec {
    let sizes = match family {
        Family::Chebyshev => vec![cfg.local_sizes.first().copied().unwrap_or(1); cfg.clients],
        _ => cfg.sizes.clone(),
    };
    ScenarioSpec {
        family,
        sizes,
        dim: cfg.dim,
        sigma: cfg.sigma,
        seed: datagen::split_seed(cfg.seed, k as u64),
        noise: Noise::Gaussian,
    }
}

fn alg_config(cfg: &ExperimentConfig, algorithm: Algorithm, eta: f64) -> AlgorithmConfig {
    AlgorithmConfig {
        early_stop: cfg.early_stop,
        ..AlgorithmConfig::new(algorithm, eta, cfg.rounds)
    }
}

fn row(
    cfg: &ExperimentConfig,
    alg: Algorithm,
    batch: Option<usize>,
    x: f64,
    metric: &str,
    trial: usize,
    value: f64,
) -> ResultRow {
    ResultRow {
        experiment: cfg.experiment.to_string(),
        algorithm: alg.to_string(),
        local_steps: alg.local_steps(),
        batch_size: batch,
        x,
        metric: metric.into(),
        trial,
        value,
    }
}

fn trace(alg: Algorithm, batch: Option<usize>, metric: &str, trial: usize, values: Vec<f64>) -> MetricTrace {
    MetricTrace {
        metric: metric.into(),
        algorithm: alg.to_string(),
        local_steps: alg.local_steps(),
        batch_size: batch,
        trial,
        values,
    }
}

/// Runs `f` over `0..trials` in parallel, concatenating the results in order.
fn over_trials<T: Send>(trials: usize, f: impl Fn(usize) -> Result<Vec<T>> + Sync + Send) -> Result<Vec<T>> {
    let parts: Vec<Result<Vec<T>>> = (0..trials).into_par_iter().map(f).collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Full-batch metric trajectories over rounds `0..=rounds` through the
/// compiled round.
fn compiled_traces(
    cfg: &ExperimentConfig,
    ds: &FederatedDataset,
    alg: Algorithm,
    trial: usize,
    metrics: &[&str],
) -> Result<Vec<MetricTrace>> {
    let op = AffineRound::compile(ds, &alg_config(cfg, alg, cfg.eta))?;
    let b = op.offset(&ds.stacked_responses())?;
    let oracle = GradientOracle::new(ds)?;
    let star = ds
        .theta_star()
        .ok_or_else(|| Error::config("scenario has no reference model"))?
        .clone();
    let mut theta = DVector::zeros(op.dim());
    let mut values = vec![Vec::with_capacity(cfg.rounds + 1); metrics.len()];
    for t in 0..=cfg.rounds {
        if t > 0 {
            theta = op.step(&theta, &b);
        }
        for (m, v) in metrics.iter().zip(values.iter_mut()) {
            v.push(eval_metric(m, &theta, &oracle, &star));
        }
    }
    Ok(metrics
        .iter()
        .zip(values)
        .map(|(m, v)| trace(alg, None, m, trial, v))
        .collect())
}

fn eval_metric(metric: &str, theta: &DVector<f64>, oracle: &GradientOracle, star: &DVector<f64>) -> f64 {
    match metric {
        GRAD_NORM => oracle.norm(theta),
        _ => (theta - star).norm(),
    }
}

fn fig_rounds(cfg: &ExperimentConfig, metric: &str) -> Result<ResultTable> {
    let traces = over_trials(cfg.trials, |k| {
        let ds = datagen::generate(&trial_scenario(cfg, Family::LinearHomogeneous, k))?;
        let mut out = Vec::new();
        for &alg in &cfg.algorithms {
            out.extend(compiled_traces(cfg, &ds, alg, k, &[metric])?);
        }
        Ok(out)
    })?;
    Ok(from_traces(cfg, &traces))
}

fn from_traces(cfg: &ExperimentConfig, traces: &[MetricTrace]) -> ResultTable {
    let mut t = ResultTable::default();
    let name = cfg.experiment.to_string();
    // Group by series so the CSV reads algorithm by algorithm.
    let mut keys: Vec<(String, Option<usize>, String)> = Vec::new();
    for tr in traces {
        let k = (tr.algorithm.clone(), tr.batch_size, tr.metric.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for k in &keys {
        for tr in traces
            .iter()
            .filter(|tr| tr.algorithm == k.0 && tr.batch_size == k.1 && tr.metric == k.2)
        {
            t.push_trace(&name, tr);
        }
    }
    t
}

fn minibatch_sweep(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let metrics = [GRAD_NORM, EST_ERROR];
    let traces = over_trials(cfg.trials, |k| {
        let spec = trial_scenario(cfg, Family::LinearHomogeneous, k);
        let ds = datagen::generate(&spec)?;
        let oracle = GradientOracle::new(&ds)?;
        let star = ds
            .theta_star()
            .ok_or_else(|| Error::config("scenario has no reference model"))?
            .clone();
        let mut out = Vec::new();
        for &alg in &cfg.algorithms {
            out.extend(compiled_traces(cfg, &ds, alg, k, &metrics)?);
            for &b in &cfg.batch_sizes {
                let ac = alg_config(cfg, alg, cfg.eta).with_batch_size(b);
                let mut sim = PrimalSimulator::new(&ds, &ac, datagen::split_seed(spec.seed, b as u64))?;
                let mut values = vec![Vec::with_capacity(cfg.rounds + 1); metrics.len()];
                for t in 0..=cfg.rounds {
                    if t > 0 {
                        sim.step(&ds)?;
                    }
                    for (m, v) in metrics.iter().zip(values.iter_mut()) {
                        v.push(eval_metric(m, sim.theta(), &oracle, &star));
                    }
                }
                out.extend(
                    metrics
                        .iter()
                        .zip(values)
                        .map(|(m, v)| trace(alg, Some(b), m, k, v)),
                );
            }
        }
        Ok(out)
    })?;
    Ok(from_traces(cfg, &traces))
}

/// Response map `S_T Psi`: from `theta_0 = 0`, `theta_T = S_T Psi y`, with
/// `T` the round budget or the early-stopping time.
fn final_response_map(ds: &FederatedDataset, ac: &AlgorithmConfig) -> Result<DMatrix<f64>> {
    let op = AffineRound::compile(ds, ac)?;
    let mut rounds = ac.max_rounds;
    if ac.early_stop {
        rounds = rounds.min(spectral::early_stopping_for(ds, ac)?.t);
    }
    let (_, s) = linalg::affine_power(&op.a, rounds as u64);
    Ok(s * &op.psi)
}

struct Probe {
    index: usize,
    solver: MinNormSolver,
}

fn probes(ds: &FederatedDataset, spec: &ScenarioSpec) -> Result<[Probe; 2]> {
    let (js, jr) = datagen::probe_clients(spec);
    let mk = |j: usize| -> Result<Probe> {
        Ok(Probe {
            index: j,
            solver: MinNormSolver::new(ds.client(j).features()?)?,
        })
    };
    Ok([mk(js)?, mk(jr)?])
}

/// Squared local and federated errors of both probe clients, as
/// `[local_scarce, fed_scarce, local_rich, fed_rich]`.
fn probe_errors(ds: &FederatedDataset, probes: &[Probe; 2], fed: &DVector<f64>) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (i, p) in probes.iter().enumerate() {
        let c = ds.client(p.index);
        let truth = c
            .true_theta()
            .ok_or_else(|| Error::config("probe client has no true model"))?;
        let local = p.solver.solve(c.responses())?;
        out[2 * i] = (local - truth).norm_squared();
        out[2 * i + 1] = (fed - truth).norm_squared();
    }
    Ok(out)
}

fn fg_gamma(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let rows = over_trials(cfg.trials, |k| {
        let base = trial_scenario(
            cfg,
            Family::Heterogeneous {
                gamma: 0.0,
                layout: cfg.layout,
            },
            k,
        );
        // Covariates are shared across heterogeneity levels, so the round
        // operators and the local factorizations are too.
        let ds0 = datagen::generate(&base)?;
        let pr = probes(&ds0, &base)?;
        let maps = cfg
            .algorithms
            .iter()
            .map(|&a| final_response_map(&ds0, &alg_config(cfg, a, cfg.eta)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &g in &cfg.gammas {
            let spec = ScenarioSpec {
                family: Family::Heterogeneous {
                    gamma: g,
                    layout: cfg.layout,
                },
                ..base.clone()
            };
            let ds = datagen::generate(&spec)?;
            let y = ds.stacked_responses();
            for (&alg, m) in cfg.algorithms.iter().zip(&maps) {
                let errs = probe_errors(&ds, &pr, &(m * &y))?;
                for (name, v) in PROBE_METRICS.iter().zip(errs) {
                    out.push(row(cfg, alg, None, g, name, k, v));
                }
            }
        }
        Ok(out)
    })?;
    with_gains(cfg, rows)
}

fn fg_subspace(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let rows = over_trials(cfg.trials, |k| {
        let mut out = Vec::new();
        for &r in &cfg.ranks {
            let spec = trial_scenario(cfg, Family::Subspace { rank: r }, k);
            let ds = datagen::generate(&spec)?;
            let pr = probes(&ds, &spec)?;
            let y = ds.stacked_responses();
            let eta = datagen::subspace_eta(cfg.eta, cfg.dim, r);
            for &alg in &cfg.algorithms {
                let m = final_response_map(&ds, &alg_config(cfg, alg, eta))?;
                let errs = probe_errors(&ds, &pr, &(m * &y))?;
                for (name, v) in PROBE_METRICS.iter().zip(errs) {
                    out.push(row(cfg, alg, None, r as f64, name, k, v));
                }
            }
        }
        Ok(out)
    })?;
    with_gains(cfg, rows)
}

/// Orders the per-trial probe rows by series and appends the pooled gains
/// (ratios of trial means, so they carry no per-trial spread).
fn with_gains(cfg: &ExperimentConfig, rows: Vec<ResultRow>) -> Result<ResultTable> {
    let xs: Vec<f64> = match cfg.experiment {
        ExperimentId::FgVsGamma => cfg.gammas.clone(),
        _ => cfg.ranks.iter().map(|&r| r as f64).collect(),
    };
    let mut table = ResultTable::default();
    for &alg in &cfg.algorithms {
        let label = alg.to_string();
        for name in PROBE_METRICS {
            for &x in &xs {
                table.rows.extend(
                    rows.iter()
                        .filter(|r| r.algorithm == label && r.metric == name && r.x == x)
                        .cloned(),
                );
            }
        }
        for (gain, (loc, fed)) in [
            (FG_SCARCE, (PROBE_METRICS[0], PROBE_METRICS[1])),
            (FG_RICH, (PROBE_METRICS[2], PROBE_METRICS[3])),
        ] {
            for &x in &xs {
                let mut acc = GainAccumulator::default();
                let pick = |m: &str| {
                    rows.iter()
                        .filter(|r| r.algorithm == label && r.metric == m && r.x == x)
                        .map(|r| r.value)
                        .collect::<Vec<_>>()
                };
                for (l, f) in pick(loc).into_iter().zip(pick(fed)) {
                    acc.add(l, f);
                }
                table.pooled.push(SummaryRow {
                    experiment: cfg.experiment.to_string(),
                    algorithm: label.clone(),
                    local_steps: alg.local_steps(),
                    batch_size: None,
                    x,
                    metric: gain.into(),
                    trials: acc.count(),
                    mean: acc.gain(cfg.gain)?,
                    stderr: f64::NAN,
                });
            }
        }
    }
    Ok(table)
}

fn chebyshev_rate(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let truth = datagen::chebyshev_u5_coefficients();
    let kernel = crate::kernel::KernelSpec::Monomial { degree: 5 };
    let mse = PolynomialMse::new(&kernel, cfg.mc_samples, cfg.seed)?;
    let mut table = ResultTable::default();
    let name = cfg.experiment.to_string();
    for &alg in &cfg.algorithms {
        for &n in &cfg.local_sizes {
            // The design points are a fixed grid; only the noise varies by trial.
            let grid = ScenarioSpec {
                sizes: vec![n; cfg.clients],
                ..trial_scenario(cfg, Family::Chebyshev, 0)
            };
            let ds = datagen::generate(&grid)?;
            let m = final_response_map(&ds, &alg_config(cfg, alg, cfg.eta))?;
            let big_n = (n * cfg.clients) as f64;
            let vals = over_trials(cfg.trials, |k| {
                let spec = ScenarioSpec {
                    sizes: vec![n; cfg.clients],
                    ..trial_scenario(cfg, Family::Chebyshev, k)
                };
                let ds = datagen::generate(&spec)?;
                let theta = &m * ds.stacked_responses();
                Ok(vec![mse.mse(&theta, &truth)])
            })?;
            let mut acc = 0.0;
            for (k, &v) in vals.iter().enumerate() {
                acc += v;
                table.rows.push(row(cfg, alg, None, big_n, MSE, k, v));
            }
            let mean = acc / vals.len() as f64;
            table.pooled.push(SummaryRow {
                experiment: name.clone(),
                algorithm: alg.to_string(),
                local_steps: alg.local_steps(),
                batch_size: None,
                x: big_n,
                metric: INV_MSE.into(),
                trials: vals.len(),
                mean: 1.0 / mean,
                stderr: f64::NAN,
            });
        }
    }
    Ok(table)
}

fn theory_suite(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let name = cfg.experiment.to_string();
    let mut table = ResultTable::default();
    for (k, c) in super::checks::run_all(cfg.seed)?.into_iter().enumerate() {
        for (metric, value) in [
            (format!("{}.measured", c.name), c.measured),
            (format!("{}.limit", c.name), c.limit),
            (format!("{}.pass", c.name), if c.passed { 1.0 } else { 0.0 }),
        ] {
            table.rows.push(ResultRow {
                experiment: name.clone(),
                algorithm: "all".into(),
                local_steps: 0,
                batch_size: None,
                x: k as f64,
                metric,
                trial: 0,
                value,
            });
        }
    }
    Ok(table)
}

/// Runs an experiment and returns its table. Pure: writes nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let table = match cfg.experiment {
        ExperimentId::FigGradVsRounds => fig_rounds(cfg, GRAD_NORM)?,
        ExperimentId::FigErrVsRounds => fig_rounds(cfg, EST_ERROR)?,
        ExperimentId::MinibatchSweep => minibatch_sweep(cfg)?,
        ExperimentId::FgVsGamma => fg_gamma(cfg)?,
        ExperimentId::FgVsSubspaceR => fg_subspace(cfg)?,
        ExperimentId::ChebyshevRate => chebyshev_rate(cfg)?,
        ExperimentId::TheoryCheckSuite => return theory_suite(cfg),
    };
    table.check_complete(cfg.trials)?;
    Ok(table)
}

/// Datasets of trial 0, one per sweep point, for `dump_datasets`.
pub fn trial_zero_datasets(cfg: &ExperimentConfig) -> Result<Vec<(String, ScenarioSpec)>> {
    let base = |f| trial_scenario(cfg, f, 0);
    Ok(match cfg.experiment {
        ExperimentId::FigGradVsRounds | ExperimentId::FigErrVsRounds | ExperimentId::MinibatchSweep => {
            vec![("trial0".into(), base(Family::LinearHomogeneous))]
        }
        ExperimentId::FgVsGamma => cfg
            .gammas
            .iter()
            .map(|&g| {
                (
                    format!("gamma-{g}"),
                    base(Family::Heterogeneous {
                        gamma: g,
                        layout: cfg.layout,
                    }),
                )
            })
            .collect(),
        ExperimentId::FgVsSubspaceR => cfg
            .ranks
            .iter()
            .map(|&r| (format!("rank-{r}"), base(Family::Subspace { rank: r })))
            .collect(),
        ExperimentId::ChebyshevRate => cfg
            .local_sizes
            .iter()
            .map(|&n| {
                (
                    format!("n-{n}"),
                    ScenarioSpec {
                        sizes: vec![n; cfg.clients],
                        ..base(Family::Chebyshev)
                    },
                )
            })
            .collect(),
        ExperimentId::TheoryCheckSuite => Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::defaults;

    fn tiny(id: ExperimentId) -> ExperimentConfig {
        let mut c = defaults(id);
        c.trials = 2;
        c.dim = 4;
        c.rounds = 5;
        c.mc_samples = 500;
        match id {
            ExperimentId::FgVsGamma | ExperimentId::FgVsSubspaceR => {
                c.sizes = vec![3, 3, 12, 12];
                c.clients = 4;
                c.gammas = vec![0.0, 1.0];
                c.ranks = vec![1, 4];
            }
            ExperimentId::ChebyshevRate => {
                c.clients = 4;
                c.local_sizes = vec![2, 3];
                c.dim = 6;
            }
            _ => {
                c.sizes = vec![6; 3];
                c.clients = 3;
                c.batch_sizes = vec![2, 3];
            }
        }
        c
    }

    #[test]
    fn every_experiment_runs_small() {
        for id in ExperimentId::ALL {
            if id == ExperimentId::TheoryCheckSuite {
                continue;
            }
            let c = tiny(id);
            let t = run_experiment(&c).unwrap_or_else(|e| panic!("{id}: {e}"));
            assert!(!t.rows.is_empty(), "{id}");
            assert_eq!(run_experiment(&c).unwrap().to_csv(), t.to_csv(), "{id}");
        }
    }

    #[test]
    fn zero_rounds_gives_round_zero_rows() {
        let mut c = tiny(ExperimentId::FigGradVsRounds);
        c.trials = 1;
        c.rounds = 0;
        let t = run_experiment(&c).unwrap();
        assert_eq!(t.rows.len(), c.algorithms.len());
        assert!(t.rows.iter().all(|r| r.x == 0.0 && r.trial == 0));
    }

    #[test]
    fn full_batch_sweep_matches_compiled_baseline() {
        let mut c = tiny(ExperimentId::MinibatchSweep);
        c.batch_sizes = vec![6];
        c.trials = 1;
        let t = run_experiment(&c).unwrap();
        let series = |b: Option<usize>| {
            t.rows
                .iter()
                .filter(|r| r.batch_size == b && r.metric == EST_ERROR && r.algorithm == "fedavg:5")
                .map(|r| r.value)
                .collect::<Vec<_>>()
        };
        let (a, b) = (series(None), series(Some(6)));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * x.max(1.0));
        }
    }
}
