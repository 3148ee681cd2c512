use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cqrp::cv::{CvConfig, CvPlan, LambdaGrid, PenaltyKind, DEFAULT_FOLDS, DEFAULT_X_INF};
use cqrp::diagnostics::{run_diagnostics, DiagnoseConfig, DEFAULT_ORACLE_SAMPLES};
use cqrp::harness::{run_monte_carlo_partial, RunConfig};
use cqrp::process::{estimate_process, estimate_unpenalized, Dataset, FitConfig, TauGrid};
use cqrp::simulate::SimulationModel;
use cqrp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cqrp",
    version,
    about = "Censored quantile regression processes"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base seed for simulation and fold assignment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a simulation model.
    Simulate {
        /// 1, 2, 1u (uncensored), dep1 or dep1:<ar>.
        #[arg(long)]
        model: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        replication: u64,
    },
    /// Fit the quantile process to a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.15:0.7:0.01")]
        grid: String,
        /// none, adaptive, average-int or average-max.
        #[arg(long, default_value = "none")]
        penalty: String,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long)]
        penalize_intercept: bool,
    },
    /// Select the penalty level by cross-validation.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        k: usize,
        /// `auto` or a comma-separated list.
        #[arg(long, default_value = "auto")]
        lambdas: String,
        #[arg(long, default_value = "0.15:0.7:0.01")]
        grid: String,
        #[arg(long, default_value = "adaptive")]
        penalty: String,
        #[arg(long, default_value_t = DEFAULT_X_INF)]
        x_inf: f64,
    },
    /// Run a Monte Carlo study described by a JSON config.
    Mc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Empirical-process and remainder diagnostics.
    Diagnose {
        #[arg(long, default_value = "2")]
        model: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value = "0.15:0.7:0.01")]
        grid: String,
        #[arg(long, default_value_t = DEFAULT_ORACLE_SAMPLES)]
        oracle_samples: usize,
        /// Skip the unpenalised fits and the remainder.
        #[arg(long)]
        no_bahadur: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(t) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io {
            path: p.into(),
            source,
        }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Error::Io {
                path: "<stdout>".into(),
                source,
            }),
    }
}

fn run(cli: Cli) -> Result<()> {
    let Global { seed, threads, out } = cli.global;
    let seed_or_zero = seed.unwrap_or(0);
    match cli.command {
        Command::Simulate {
            model,
            n,
            replication,
        } => {
            let data = SimulationModel::parse(&model)?.generate_replication(
                n,
                seed_or_zero,
                replication,
            )?;
            match out {
                Some(p) => data.save(&p),
                None => data
                    .write_csv(std::io::stdout())
                    .map_err(|source| Error::Csv {
                        path: "<stdout>".into(),
                        source,
                    }),
            }
        }
        Command::Fit {
            data,
            grid,
            penalty,
            lambda,
            penalize_intercept,
        } => {
            let data = Dataset::load(&data)?;
            let grid = TauGrid::parse(&grid)?;
            let kind = PenaltyKind::parse(&penalty)?;
            let pilot = if kind.needs_pilot() {
                Some(estimate_unpenalized(&data, &grid)?)
            } else {
                None
            };
            let provider = kind.build(pilot.as_ref(), &grid)?;
            let config = FitConfig {
                penalize_intercept,
                ..FitConfig::default()
            };
            let fit = estimate_process(&data, &grid, &provider, lambda, &config)?;
            write_out(out.as_deref(), &(fit.to_json()? + "\n"))
        }
        Command::Cv {
            data,
            k,
            lambdas,
            grid,
            penalty,
            x_inf,
        } => {
            let data = Dataset::load(&data)?;
            let grid = TauGrid::parse(&grid)?;
            let kind = PenaltyKind::parse(&penalty)?;
            let config = CvConfig {
                k,
                lambdas: LambdaGrid::parse(&lambdas)?,
                x_inf,
                seed: seed_or_zero,
            };
            let plan = CvPlan::new(&data, &grid, config.k, config.x_inf, config.seed)?;
            let report = plan.select(&data, &kind, &config.lambdas.values(data.n()))?;
            write_out(
                out.as_deref(),
                &(serde_json::to_string_pretty(&report)? + "\n"),
            )
        }
        Command::Mc { config } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if threads.is_some() {
                config.threads = threads;
            }
            if out.is_some() {
                config.outputs.json = out.clone();
            }
            let (report, failure) = run_monte_carlo_partial(&config)?;
            report.emit(&config.outputs)?;
            if out.is_none() && config.outputs == Default::default() {
                write_out(None, &(report.to_json()? + "\n"))?;
            }
            match failure {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Diagnose {
            model,
            n,
            reps,
            grid,
            oracle_samples,
            no_bahadur,
        } => {
            let mut config = DiagnoseConfig::new(SimulationModel::parse(&model)?, n, reps)?;
            config.seed = seed_or_zero;
            config.grid = TauGrid::parse(&grid)?;
            config.oracle_samples = oracle_samples;
            config.bahadur = !no_bahadur;
            let report = run_diagnostics(&config)?;
            write_out(
                out.as_deref(),
                &(serde_json::to_string_pretty(&report)? + "\n"),
            )
        }
    }
}
