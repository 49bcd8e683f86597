use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use firesale::calibration::read_records_file;
use firesale::clearing::write_trace;
use firesale::equilibrium::solve_equilibrium;
use firesale::scenario::{
    min_safe_leverage, parse_grid, risk_metrics, summarize, sweep, write_evaluations_csv, write_summary_csv,
    write_sweep_csv, write_threshold_csv, LeverageSearch, ScenarioConfig, ScenarioResult, StrategyChoice, SweepParam,
    SystemDocument,
};
use firesale::{ClearingProblem, ClearingState, Error, SolveStatus};

#[derive(Parser)]
#[command(
    name = "firesale",
    version,
    about = "Clearing, fire sales and leverage caps in interbank networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a system document from bank records and a scenario config.
    Calibrate {
        #[arg(long)]
        banks: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clear a system under a known liquidation strategy.
    Clear {
        #[arg(long)]
        system: PathBuf,
        /// `single_asset`, `proportional`, `best_first:EPS` or `worst_first:EPS`.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
        /// Iterate trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Clear a system with equilibrium liquidations.
    Equilibrium {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Re-run the document's scenario over a parameter grid.
    Sweep {
        #[arg(long)]
        system: PathBuf,
        /// alpha, pin, prob, sigma, beta or leverage.
        #[arg(long)]
        param: String,
        /// `a:b:step`
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-point mean and 5%/95% quantiles.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Override the document's strategy for every point.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Smallest uniform leverage cap at which the scenario is stable.
    MinLeverage {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Every evaluated cap with its proxies.
        #[arg(long)]
        evaluations: Option<PathBuf>,
        #[arg(long)]
        lower: Option<f64>,
        #[arg(long)]
        upper: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
}

#[derive(Serialize)]
struct SolutionReport<'a> {
    strategy: StrategyChoice,
    state: &'a ClearingState,
    residual: f64,
    iterations: usize,
    status: SolveStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    nash_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nash_certified: Option<bool>,
    metrics: ScenarioResult,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> firesale::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> firesale::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn execute(cmd: Command) -> firesale::Result<()> {
    match cmd {
        Command::Calibrate { banks, config, out } => {
            let records = read_records_file(&banks)?;
            let config = ScenarioConfig::from_json_file(&config)?;
            SystemDocument::calibrate(&records, &config)?.write(&out)
        }
        Command::Clear {
            system,
            strategy,
            out,
            trace,
        } => {
            let doc = SystemDocument::read(&system)?;
            let StrategyChoice::Known(strategy) = StrategyChoice::parse(&strategy)? else {
                return Err(Error::Input(
                    "use the `equilibrium` subcommand for equilibrium liquidations".into(),
                ));
            };
            let demand = doc.demand()?;
            let rl = doc.system.relative_liabilities();
            let mut opts = doc.config.solver;
            opts.record_trace = trace.is_some();
            let sol = ClearingProblem::new(&doc.system, &rl, &demand, strategy)?.solve(&opts)?;
            if let Some(path) = trace {
                write_trace(create(&path)?, &sol.trace, false)?;
            }
            let metrics = risk_metrics(
                &sol.state,
                sol.status,
                &doc.system,
                &rl,
                doc.config.metric_tolerance(&rl),
            );
            write_json(
                &out,
                &SolutionReport {
                    strategy: StrategyChoice::Known(strategy),
                    state: &sol.state,
                    residual: sol.residual,
                    iterations: sol.iterations,
                    status: sol.status,
                    nash_gap: None,
                    nash_certified: None,
                    metrics,
                },
            )
        }
        Command::Equilibrium {
            system,
            out,
            seed,
            trace,
        } => {
            let doc = SystemDocument::read(&system)?;
            let demand = doc.demand()?;
            let rl = doc.system.relative_liabilities();
            let mut opts = doc.config.equilibrium;
            if let Some(s) = seed {
                opts.seed = s;
            }
            opts.record_trace = trace.is_some();
            let sol = solve_equilibrium(&doc.system, &rl, &demand, &opts)?;
            if let Some(path) = trace {
                write_trace(create(&path)?, &sol.trace, true)?;
            }
            let metrics = risk_metrics(
                &sol.state,
                sol.status,
                &doc.system,
                &rl,
                doc.config.metric_tolerance(&rl),
            );
            write_json(
                &out,
                &SolutionReport {
                    strategy: StrategyChoice::EQUILIBRIUM,
                    state: &sol.state,
                    residual: sol.residual,
                    iterations: sol.iterations,
                    status: sol.status,
                    nash_gap: Some(sol.nash_gap),
                    nash_certified: Some(sol.nash_certified),
                    metrics,
                },
            )
        }
        Command::Sweep {
            system,
            param,
            grid,
            reps,
            seed,
            out,
            summary,
            strategy,
        } => {
            let doc = SystemDocument::read(&system)?;
            let param: SweepParam = param.parse()?;
            let grid = parse_grid(&grid)?;
            let mut config = doc.config.clone();
            if let Some(s) = strategy {
                config.strategy = StrategyChoice::parse(&s)?;
            }
            let rows = sweep(&doc.records, &config, param, &grid, reps, seed)?;
            write_sweep_csv(create(&out)?, &rows)?;
            if let Some(path) = summary {
                write_summary_csv(create(&path)?, &summarize(&rows))?;
            }
            Ok(())
        }
        Command::MinLeverage {
            system,
            out,
            evaluations,
            lower,
            upper,
            step,
        } => {
            let doc = SystemDocument::read(&system)?;
            let base = doc.config.leverage_search;
            let search = LeverageSearch {
                lower: lower.unwrap_or(base.lower),
                upper: upper.unwrap_or(base.upper),
                step: step.unwrap_or(base.step),
            };
            let result = min_safe_leverage(&doc.records, &doc.config, &search)?;
            write_threshold_csv(create(&out)?, &result)?;
            if let Some(path) = evaluations {
                write_evaluations_csv(create(&path)?, &result)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Solver(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
