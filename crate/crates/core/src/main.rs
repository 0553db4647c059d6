use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedkernel::harness::{self, checks, plot, table, ExperimentConfig, ExperimentId};
use fedkernel::Result;

#[derive(Parser)]
#[command(
    name = "fedkernel",
    version,
    about = "FedAvg/FedProx kernel regression experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides FEDKERNEL_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// List the registered experiments.
    List,
    /// Run the theory check suite; exits nonzero if any check fails.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the suite's run directory here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot one metric from a results.csv or summary.csv.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        metric: String,
        /// SVG path; defaults to plot-<metric>.svg next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log_y: bool,
        #[arg(long, default_value = "x")]
        x_label: String,
    },
}

fn run(config: &Path, seed: Option<u64>, out: Option<&Path>, trials: Option<usize>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    let dir = harness::resolve_out_dir(&cfg, out);
    let report = harness::execute(&cfg, &dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}: wrote {}", cfg.experiment, report.dir.display());
    for a in &report.artifacts {
        println!("  {a}");
    }
    Ok(())
}

fn check(seed: u64, out: Option<&Path>) -> Result<bool> {
    let outcomes = checks::run_all(seed)?;
    for c in &outcomes {
        println!(
            "{} {:<38} measured {:.3e} limit {:.3e}  ({})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.limit,
            c.detail
        );
    }
    if let Some(dir) = out {
        let cfg = ExperimentConfig {
            seed,
            ..harness::config::defaults(ExperimentId::TheoryCheckSuite)
        };
        harness::execute(&cfg, dir)?;
    }
    Ok(outcomes.iter().all(|c| c.passed))
}

fn plot_cmd(results: &Path, metric: &str, out: Option<&Path>, log_y: bool, x_label: &str) -> Result<()> {
    let rows = table::read_summary(results)?;
    let spec = plot::PlotSpec::new(metric, x_label, log_y);
    let p = plot::emit_plot(&rows, &spec)?;
    for w in &p.warnings {
        eprintln!("warning: {w}");
    }
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| {
        results
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("plot-{metric}.svg"))
    });
    std::fs::write(&target, p.svg).map_err(|e| fedkernel::Error::Io {
        path: target.clone(),
        source: e,
    })?;
    println!("{}", target.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            trials,
        } => run(config, *seed, out.as_deref(), *trials).map(|_| true),
        Command::List => {
            for id in ExperimentId::ALL {
                println!("{:<20} {}", id.as_str(), id.description());
            }
            Ok(true)
        }
        Command::Check { seed, out } => check(*seed, out.as_deref()),
        Command::Plot {
            results,
            metric,
            out,
            log_y,
            x_label,
        } => plot_cmd(results, metric, out.as_deref(), *log_y, x_label).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
