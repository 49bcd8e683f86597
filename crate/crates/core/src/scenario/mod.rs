//! End-to-end experiments on calibrated systems.
//!
//! A [`ScenarioConfig`] is a full recipe: it names the calibration inputs, the
//! inverse demand function, the liquidation rule, the solver settings and the
//! optional counterfactual and shock. [`build`] turns records plus a recipe
//! into a system, [`run`] clears it and reduces the outcome to three
//! systemic-risk proxies.

mod sweep;
mod threshold;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use sweep::{
    parse_grid, quantile, summarize, sweep, write_summary_csv, write_sweep_csv, SummaryRow, SweepParam, SweepRow,
};
pub use threshold::{
    min_safe_leverage, min_safe_leverage_for, write_evaluations_csv, write_threshold_csv, LeverageSearch,
    ThresholdResult,
};

use crate::calibration::{
    apply_leverage_counterfactual, apply_shock, calibrate, records_for_year, Adjacency, AssetSplit, BankRecord,
    CalibrationConfig, FirmAdjustment,
};
use crate::clearing::{ClearingProblem, SolveStatus, SolverOptions};
use crate::demand::{DemandSpec, InverseDemand};
use crate::equilibrium::{solve_equilibrium, EquilibriumOptions};
use crate::error::{Error, Result};
use crate::liquidation::LiquidationStrategy;
use crate::model::{ClearingState, FinancialSystem, RelativeLiabilities};

/// The three systemic-risk proxies for one solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub frac_defaulting: f64,
    pub frac_leverage_violating: f64,
    pub outside_payment_fraction: f64,
    pub status: SolveStatus,
    pub interpolated: bool,
}

/// Classifies a solved state; `tol` is an absolute currency tolerance.
pub fn risk_metrics(
    state: &ClearingState,
    status: SolveStatus,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    tol: f64,
) -> ScenarioResult {
    let n = system.n();
    let mut defaulting = 0usize;
    let mut violating = 0usize;
    let mut paid = 0.0;
    let mut owed = 0.0;
    for firm in 1..=n {
        let p = state.payments[firm];
        if p < rl.total[firm] - tol {
            defaulting += 1;
        }
        let pos = system.position(firm, &state.payments, &state.prices, rl);
        if pos.liquidation_requirement() > pos.illiquid_value + tol {
            violating += 1;
        }
        let share = rl.outside_share(firm);
        paid += share * p;
        owed += share * rl.total[firm];
    }
    let denom = n.max(1) as f64;
    let outside = if owed > 0.0 { (paid / owed).clamp(0.0, 1.0) } else { 1.0 };
    ScenarioResult {
        frac_defaulting: defaulting as f64 / denom,
        frac_leverage_violating: violating as f64 / denom,
        outside_payment_fraction: outside,
        status,
        interpolated: false,
    }
}

/// Known liquidation rule or equilibrium liquidations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategyChoice {
    Equilibrium(EquilibriumTag),
    Known(LiquidationStrategy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquilibriumTag {
    kind: EquilibriumKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EquilibriumKind {
    Equilibrium,
}

impl StrategyChoice {
    pub const EQUILIBRIUM: StrategyChoice = StrategyChoice::Equilibrium(EquilibriumTag {
        kind: EquilibriumKind::Equilibrium,
    });

    /// `equilibrium` or anything [`LiquidationStrategy::parse`] accepts.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim() == "equilibrium" {
            Ok(Self::EQUILIBRIUM)
        } else {
            LiquidationStrategy::parse(text).map(StrategyChoice::Known)
        }
    }
}

impl Default for StrategyChoice {
    fn default() -> Self {
        StrategyChoice::Known(LiquidationStrategy::SingleAsset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    pub enabled: bool,
    pub split: AssetSplit,
}

/// Predicate used by the leverage threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    #[default]
    NoDefaults,
    FullOutsidePayment,
}

impl Stability {
    pub fn holds(self, r: &ScenarioResult) -> bool {
        r.status == SolveStatus::Converged
            && match self {
                Stability::NoDefaults => r.frac_defaulting == 0.0,
                Stability::FullOutsidePayment => r.outside_payment_fraction >= 1.0 - 1e-9,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Record year to calibrate; the earliest year when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(flatten)]
    pub calibration: CalibrationConfig,
    pub inverse_demand: DemandSpec,
    pub strategy: StrategyChoice,
    pub solver: SolverOptions,
    pub equilibrium: EquilibriumOptions,
    pub counterfactual: CounterfactualConfig,
    pub beta: f64,
    pub stability: Stability,
    pub leverage_search: LeverageSearch,
    /// Absolute tolerance for the default and violation tests; `None` means `1e-6 * (1 + max p̄)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric_tol: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            year: None,
            calibration: CalibrationConfig::default(),
            inverse_demand: DemandSpec::default(),
            strategy: StrategyChoice::default(),
            solver: SolverOptions::default(),
            equilibrium: EquilibriumOptions::default(),
            counterfactual: CounterfactualConfig::default(),
            beta: 0.0,
            stability: Stability::default(),
            leverage_search: LeverageSearch::default(),
            metric_tol: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        self.calibration.check()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        if let StrategyChoice::Known(s) = self.strategy {
            s.check(Some(self.calibration.m))?;
        }
        self.leverage_search.check()
    }

    pub fn metric_tolerance(&self, rl: &RelativeLiabilities) -> f64 {
        self.metric_tol.unwrap_or(1e-6 * (1.0 + rl.max_obligation()))
    }
}

/// A system built from records by a scenario recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Built {
    pub system: FinancialSystem,
    pub adjacency: Adjacency,
    pub capital: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjustments: Vec<FirmAdjustment>,
}

/// Records of the configured year.
pub fn select_year(records: &[BankRecord], config: &ScenarioConfig) -> Result<Vec<BankRecord>> {
    let year = match config.year {
        Some(y) => y,
        None => {
            crate::calibration::records::first_year(records).ok_or_else(|| Error::Input("no bank records".into()))?
        }
    };
    records_for_year(records, year)
}

/// Calibrates, applies the counterfactual if enabled, then the shock.
pub fn build(year_records: &[BankRecord], config: &ScenarioConfig) -> Result<Built> {
    config.check()?;
    let max_price = config.inverse_demand.max_price(config.calibration.m)?;
    let cal = calibrate(year_records, &config.calibration, &max_price)?;
    let mut system = cal.system;
    let mut adjustments = Vec::new();
    if config.counterfactual.enabled {
        let rl = system.relative_liabilities();
        let cf = apply_leverage_counterfactual(&system, &rl, &max_price, config.counterfactual.split)?;
        system = cf.system;
        adjustments = cf.adjustments;
    }
    if config.beta != 0.0 {
        system = apply_shock(&system, config.beta)?;
    }
    Ok(Built {
        system,
        adjacency: cal.adjacency,
        capital: cal.capital,
        adjustments,
    })
}

/// Clearing outcome for either kind of strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub state: ClearingState,
    pub status: SolveStatus,
    pub residual: f64,
    pub iterations: usize,
    pub nash_gap: Option<f64>,
}

pub fn solve(system: &FinancialSystem, demand: &InverseDemand, config: &ScenarioConfig) -> Result<Outcome> {
    let rl = system.relative_liabilities();
    match config.strategy {
        StrategyChoice::Known(strategy) => {
            let sol = ClearingProblem::new(system, &rl, demand, strategy)?.solve(&config.solver)?;
            Ok(Outcome {
                state: sol.state,
                status: sol.status,
                residual: sol.residual,
                iterations: sol.iterations,
                nash_gap: None,
            })
        }
        StrategyChoice::Equilibrium(_) => {
            let sol = solve_equilibrium(system, &rl, demand, &config.equilibrium)?;
            Ok(Outcome {
                state: sol.state,
                status: sol.status,
                residual: sol.residual,
                iterations: sol.iterations,
                nash_gap: Some(sol.nash_gap),
            })
        }
    }
}

/// Solves a built system and reduces it to risk proxies.
pub fn run(system: &FinancialSystem, config: &ScenarioConfig) -> Result<ScenarioResult> {
    let demand = config.inverse_demand.build(system.m(), system.illiquid())?;
    let outcome = solve(system, &demand, config)?;
    let rl = system.relative_liabilities();
    Ok(risk_metrics(
        &outcome.state,
        outcome.status,
        system,
        &rl,
        config.metric_tolerance(&rl),
    ))
}

pub const DOCUMENT_FORMAT: &str = "firesale-system/1";

/// Self-describing calibrated system: the recipe, its inputs and the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemDocument {
    pub format: String,
    pub year: i32,
    pub config: ScenarioConfig,
    pub records: Vec<BankRecord>,
    pub n: usize,
    pub m: usize,
    pub system: FinancialSystem,
    pub adjacency: Adjacency,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjustments: Vec<FirmAdjustment>,
}

impl SystemDocument {
    /// Calibrates the configured year of `records`.
    pub fn calibrate(records: &[BankRecord], config: &ScenarioConfig) -> Result<Self> {
        let mut config = config.clone();
        config.inverse_demand = config.inverse_demand.resolve()?;
        let year_records = select_year(records, &config)?;
        let year = year_records[0].year;
        config.year = Some(year);
        let built = build(&year_records, &config)?;
        Ok(Self {
            format: DOCUMENT_FORMAT.to_string(),
            year,
            n: built.system.n(),
            m: built.system.m(),
            config,
            records: year_records,
            system: built.system,
            adjacency: built.adjacency,
            adjustments: built.adjustments,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: Self = serde_json::from_str(&text)?;
        if doc.format != DOCUMENT_FORMAT {
            return Err(Error::Input(format!("unsupported document format `{}`", doc.format)));
        }
        if doc.n != doc.system.n() || doc.m != doc.system.m() {
            return Err(Error::Dimension("document dimensions disagree with its system".into()));
        }
        doc.config.check()?;
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn demand(&self) -> Result<InverseDemand> {
        self.config.inverse_demand.build(self.m, self.system.illiquid())
    }
}
