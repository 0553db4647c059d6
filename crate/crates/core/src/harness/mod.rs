//! Experiment harness: registry, configuration, orchestration and output.
//!
//! A run directory holds `results.csv`, `summary.csv`, one `plot-<metric>.svg`
//! per plotted metric, `run.log` and `run-manifest.json`. A `.lock` file
//! marks the directory as owned by a running process.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod plot;
pub mod table;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

pub use config::ExperimentConfig;
pub use experiments::run_experiment;
pub use plot::{emit_plot, PlotSpec};
pub use table::{ResultRow, ResultTable, SummaryRow};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "FEDKERNEL_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    FigGradVsRounds,
    FigErrVsRounds,
    MinibatchSweep,
    FgVsGamma,
    FgVsSubspaceR,
    ChebyshevRate,
    TheoryCheckSuite,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::FigGradVsRounds,
        ExperimentId::FigErrVsRounds,
        ExperimentId::MinibatchSweep,
        ExperimentId::FgVsGamma,
        ExperimentId::FgVsSubspaceR,
        ExperimentId::ChebyshevRate,
        ExperimentId::TheoryCheckSuite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::FigGradVsRounds => "fig-grad-vs-rounds",
            ExperimentId::FigErrVsRounds => "fig-err-vs-rounds",
            ExperimentId::MinibatchSweep => "minibatch-sweep",
            ExperimentId::FgVsGamma => "fg-vs-gamma",
            ExperimentId::FgVsSubspaceR => "fg-vs-subspace-r",
            ExperimentId::ChebyshevRate => "chebyshev-rate",
            ExperimentId::TheoryCheckSuite => "theory-check-suite",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentId::FigGradVsRounds => "global gradient norm per round, homogeneous linear data",
            ExperimentId::FigErrVsRounds => "estimation error per round, homogeneous linear data",
            ExperimentId::MinibatchSweep => "gradient norm and error per round for several minibatch sizes",
            ExperimentId::FgVsGamma => "empirical federation gain against model heterogeneity",
            ExperimentId::FgVsSubspaceR => "empirical federation gain against local covariate rank",
            ExperimentId::ChebyshevRate => "Monte-Carlo MSE against sample size, degree-5 polynomial kernel",
            ExperimentId::TheoryCheckSuite => "numerical checks of the analytical results",
        }
    }

    /// Plots written for this experiment.
    pub fn plots(self) -> Vec<PlotSpec> {
        use experiments::*;
        let log = |m: &str, x: &str| PlotSpec::new(m, x, true);
        match self {
            ExperimentId::FigGradVsRounds => vec![log(GRAD_NORM, "round")],
            ExperimentId::FigErrVsRounds => vec![log(EST_ERROR, "round")],
            ExperimentId::MinibatchSweep => vec![log(GRAD_NORM, "round"), log(EST_ERROR, "round")],
            ExperimentId::FgVsGamma => vec![log(FG_SCARCE, "Gamma"), log(FG_RICH, "Gamma")],
            ExperimentId::FgVsSubspaceR => vec![log(FG_SCARCE, "r"), log(FG_RICH, "r")],
            ExperimentId::ChebyshevRate => {
                vec![log(MSE, "N"), PlotSpec::new(INV_MSE, "N", false)]
            }
            ExperimentId::TheoryCheckSuite => Vec::new(),
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown experiment {s:?}; registered: {}",
                    ExperimentId::ALL.map(|e| e.as_str()).join(", ")
                ))
            })
    }
}

/// Output directory: explicit flag, then [`OUT_ENV`], then the config's
/// `out`, then `runs/<experiment>-seed<seed>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.experiment, cfg.seed)))
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::config(format!(
                        "{} is locked by another run (remove {} if that run is gone)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: ExperimentId,
    seed: u64,
    config: &'a ExperimentConfig,
    artifacts: Vec<String>,
}

/// What a finished run wrote.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
    pub summary: Vec<SummaryRow>,
}

/// Runs the experiment and writes every artifact into `dir`.
pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let _lock = RunLock::acquire(dir)?;
    let table = run_experiment(cfg)?;
    let summary = table.summarize();
    let mut artifacts = Vec::new();
    let mut log = vec![format!(
        "{} {} experiment={} seed={} trials={}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        cfg.experiment,
        cfg.seed,
        cfg.trials
    )];

    table.write_csv(&dir.join("results.csv"))?;
    artifacts.push("results.csv".to_string());
    table::write_file(&dir.join("summary.csv"), &table::summary_csv(&summary))?;
    artifacts.push("summary.csv".to_string());

    let mut warnings = Vec::new();
    for spec in cfg.experiment.plots() {
        let plot = emit_plot(&summary, &spec)?;
        let name = format!("plot-{}.svg", spec.metric);
        table::write_file(&dir.join(&name), &plot.svg)?;
        artifacts.push(name);
        for w in plot.warnings {
            log.push(format!("warning: {w}"));
            warnings.push(w);
        }
    }

    if cfg.dump_datasets {
        for (name, spec) in experiments::trial_zero_datasets(cfg)? {
            let sub = dir.join("datasets").join(&name);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let ds = crate::datagen::generate(&spec)?;
            crate::datagen::write_dataset(&ds, &sub, Some(&spec))?;
            artifacts.push(format!("datasets/{name}"));
        }
    }

    if cfg.experiment == ExperimentId::TheoryCheckSuite {
        for r in summary.iter().filter(|r| r.metric.ends_with(".pass")) {
            log.push(format!(
                "{} {}",
                if r.mean == 1.0 { "PASS" } else { "FAIL" },
                r.metric.trim_end_matches(".pass")
            ));
        }
    }

    artifacts.push("run.log".to_string());
    artifacts.push("run-manifest.json".to_string());
    log.push(format!("wrote {}", artifacts.join(", ")));
    let mut log_text = log.join("\n");
    log_text.push('\n');
    table::write_file(&dir.join("run.log"), &log_text)?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment,
        seed: cfg.seed,
        config: cfg,
        artifacts: artifacts.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    table::write_file(&dir.join("run-manifest.json"), &(json + "\n"))?;

    Ok(RunReport {
        dir: dir.to_path_buf(),
        artifacts,
        warnings,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in ExperimentId::ALL {
            assert_eq!(id.as_str().parse::<ExperimentId>().unwrap(), id);
        }
        let err = "nope".parse::<ExperimentId>().unwrap_err().to_string();
        assert!(err.contains("fig-grad-vs-rounds"));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }
}
