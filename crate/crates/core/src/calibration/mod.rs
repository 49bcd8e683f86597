//! Building financial systems from balance-sheet totals.
//!
//! The pipeline samples a random link structure, allocates each firm's total
//! liabilities over its links by a linear program that keeps as much of the
//! obligations inside the network as the incoming caps allow, samples
//! portfolios from each firm's capital, and optionally moves every firm onto
//! its leverage cap before applying a uniform shock to holdings.

pub mod lp;
pub mod records;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FinancialSystem, Matrix, RelativeLiabilities};
use crate::seed;
use lp::{Constraint, LinearProgram, Relation};
pub use records::{read_records, read_records_file, records_for_year, BankRecord};

const STREAM_ADJACENCY: u64 = 1;
const STREAM_PORTFOLIO: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LeverageCap {
    Uniform(f64),
    PerFirm(Vec<f64>),
}

impl LeverageCap {
    pub fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            LeverageCap::Uniform(v) => Ok(vec![*v; n]),
            LeverageCap::PerFirm(v) if v.len() == n => Ok(v.clone()),
            LeverageCap::PerFirm(v) => Err(Error::Dimension(format!("{} leverage caps for {n} firms", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub connection_prob: f64,
    /// Incoming interbank obligations of firm `i` are capped at this fraction of its assets.
    pub max_interbank_fraction: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub m: usize,
    pub seed: u64,
    pub leverage_cap: LeverageCap,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            connection_prob: 0.25,
            max_interbank_fraction: 0.1,
            alpha: 0.0,
            sigma: 0.0,
            m: 1,
            seed: 0,
            leverage_cap: LeverageCap::Uniform(10.0),
        }
    }
}

fn unit_interval(field: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl CalibrationConfig {
    pub fn check(&self) -> Result<()> {
        unit_interval("connection_prob", self.connection_prob)?;
        unit_interval("max_interbank_fraction", self.max_interbank_fraction)?;
        unit_interval("alpha", self.alpha)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(
                "sigma",
                format!("must be finite and >= 0, got {}", self.sigma),
            ));
        }
        if self.m == 0 {
            return Err(Error::invalid("m", "at least one illiquid asset is needed"));
        }
        let caps = match &self.leverage_cap {
            LeverageCap::Uniform(v) => std::slice::from_ref(v),
            LeverageCap::PerFirm(v) => v.as_slice(),
        };
        if caps.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("leverage_cap", "caps must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Directed links `i -> j` between firms `0..n` (firm indices, not node indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    n: usize,
    links: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            links: vec![false; n * n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, i != j);
            }
        }
        a
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has(&self, i: usize, j: usize) -> bool {
        self.links[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.links[i * self.n + j] = v && i != j;
    }

    pub fn out_degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has(i, j)).count()
    }

    pub fn edge_count(&self) -> usize {
        self.links.iter().filter(|&&v| v).count()
    }
}

/// Independent links with probability `prob` for every ordered pair of distinct firms.
pub fn sample_adjacency(n: usize, prob: f64, seed: u64) -> Result<Adjacency> {
    unit_interval("connection_prob", prob)?;
    let mut rng = seed::rng(seed, &[STREAM_ADJACENCY]);
    let mut a = Adjacency::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let link = rng.random_bool(prob);
                a.set(i, j, link);
            }
        }
    }
    Ok(a)
}

/// Allocates obligations over the links, minimising what is owed to the outside node.
///
/// `obligations[i]` and `incoming_cap[i]` refer to firm `i` (node `i + 1`).
pub fn calibrate_liabilities(obligations: &[f64], adjacency: &Adjacency, incoming_cap: &[f64]) -> Result<Matrix> {
    let n = obligations.len();
    if adjacency.n() != n || incoming_cap.len() != n {
        return Err(Error::Dimension("calibration inputs disagree on the firm count".into()));
    }
    for (field, v) in [("obligations", obligations), ("incoming_cap", incoming_cap)] {
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid(field, "entries must be finite and nonnegative"));
        }
    }
    let scale = obligations.iter().chain(incoming_cap).copied().fold(0.0, f64::max);
    let mut l = Matrix::zeros(n + 1, n + 1);
    if scale == 0.0 {
        return Ok(l);
    }
    // Variables: L_i0 for every firm, then one per link.
    let mut vars: Vec<(usize, usize)> = (0..n).map(|i| (i, usize::MAX)).collect();
    for i in 0..n {
        for j in 0..n {
            if adjacency.has(i, j) {
                vars.push((i, j));
            }
        }
    }
    let width = vars.len();
    let mut constraints = Vec::with_capacity(2 * n);
    for (i, &obligation) in obligations.iter().enumerate() {
        let mut row = vec![0.0; width];
        for (v, &(from, _)) in row.iter_mut().zip(&vars) {
            if from == i {
                *v = 1.0;
            }
        }
        constraints.push(Constraint {
            coefficients: row,
            relation: Relation::Equal,
            rhs: obligation / scale,
        });
    }
    for (i, &cap) in incoming_cap.iter().enumerate() {
        let row: Vec<f64> = vars.iter().map(|&(_, to)| if to == i { 1.0 } else { 0.0 }).collect();
        if row.iter().any(|&v| v != 0.0) {
            constraints.push(Constraint {
                coefficients: row,
                relation: Relation::LessEq,
                rhs: cap / scale,
            });
        }
    }
    let objective = (0..width).map(|k| if k < n { 1.0 } else { 0.0 }).collect();
    let sol = LinearProgram { objective, constraints }.solve()?;
    for (&(i, j), &v) in vars.iter().zip(&sol.x) {
        if j != usize::MAX {
            l.row_mut(i + 1)[j + 1] = v * scale;
        }
    }
    enforce_caps(&mut l, incoming_cap);
    repair_rows(&mut l, obligations);
    Ok(l)
}

/// Scales down any column whose firm-to-firm total exceeds its cap by rounding.
fn enforce_caps(l: &mut Matrix, incoming_cap: &[f64]) {
    let n = incoming_cap.len();
    for i in 0..n {
        let total: f64 = (1..=n).map(|j| l[(j, i + 1)]).sum();
        if total > incoming_cap[i] {
            let f = incoming_cap[i] / total;
            for j in 1..=n {
                let v = l[(j, i + 1)] * f;
                l.row_mut(j)[i + 1] = v;
            }
        }
    }
}

/// Puts whatever a row does not owe inside the network on the outside node.
fn repair_rows(l: &mut Matrix, obligations: &[f64]) {
    for (i, &pbar) in obligations.iter().enumerate() {
        let row = l.row_mut(i + 1);
        let mut inside: f64 = row[1..].iter().sum();
        if inside > pbar {
            let f = pbar / inside;
            for v in row[1..].iter_mut() {
                *v *= f;
            }
            inside = row[1..].iter().sum();
        }
        row[0] = (pbar - inside).max(0.0);
    }
}

/// Cash and illiquid units for one firm with capital `capital`.
pub fn sample_portfolio<R: Rng + ?Sized>(
    capital: f64,
    alpha: f64,
    sigma: f64,
    max_price: &[f64],
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    unit_interval("alpha", alpha)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if max_price.is_empty() || max_price.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
        return Err(Error::invalid("max_price", "maximum prices must be positive"));
    }
    let weights: Vec<f64> = max_price
        .iter()
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (1.0 + sigma * z).max(0.0)
        })
        .collect();
    let illiquid = (1.0 - alpha) * capital;
    let total_weight: f64 = weights.iter().sum();
    let holdings = if total_weight > 0.0 {
        let value: f64 = weights.iter().zip(max_price).map(|(c, q)| c * q).sum();
        weights.iter().map(|c| illiquid * c / value).collect()
    } else {
        let qsum: f64 = max_price.iter().sum();
        vec![illiquid / qsum; max_price.len()]
    };
    Ok((alpha * capital, holdings))
}

/// Samples every firm's portfolio from its own seeded stream.
pub fn sample_portfolios(
    capital: &[f64],
    alpha: f64,
    sigma: f64,
    max_price: &[f64],
    seed: u64,
) -> Result<(Vec<f64>, Matrix)> {
    let m = max_price.len();
    let mut liquid = Vec::with_capacity(capital.len());
    let mut illiquid = Matrix::zeros(capital.len(), m);
    for (i, &c) in capital.iter().enumerate() {
        let mut rng = seed::rng(seed, &[STREAM_PORTFOLIO, i as u64]);
        let (x, s) = sample_portfolio(c, alpha, sigma, max_price, &mut rng)?;
        liquid.push(x);
        illiquid.row_mut(i).copy_from_slice(&s);
    }
    Ok((liquid, illiquid))
}

/// A calibrated system with the network it was built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub system: FinancialSystem,
    pub adjacency: Adjacency,
    pub capital: Vec<f64>,
}

/// Network, liabilities and portfolios for one year of records.
pub fn calibrate(records: &[BankRecord], config: &CalibrationConfig, max_price: &[f64]) -> Result<Calibrated> {
    config.check()?;
    if max_price.len() != config.m {
        return Err(Error::Dimension(format!(
            "{} maximum prices for {} assets",
            max_price.len(),
            config.m
        )));
    }
    let n = records.len();
    let capital: Vec<f64> = records.iter().map(|r| r.total_assets).collect();
    let obligations: Vec<f64> = records.iter().map(|r| r.total_liabilities).collect();
    let caps: Vec<f64> = capital.iter().map(|c| c * config.max_interbank_fraction).collect();
    let adjacency = sample_adjacency(n, config.connection_prob, config.seed)?;
    let liabilities = calibrate_liabilities(&obligations, &adjacency, &caps)?;
    let (liquid, illiquid) = sample_portfolios(&capital, config.alpha, config.sigma, max_price, config.seed)?;
    let system = FinancialSystem::new(liabilities, liquid, illiquid, config.leverage_cap.resolve(n)?)?;
    Ok(Calibrated {
        system,
        adjacency,
        capital,
    })
}

/// Where the counterfactual adjustment sits on the asset side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetSplit {
    /// Split like the firm's current holdings: cash against illiquid value at `q̄`,
    /// and across illiquid assets in proportion to units held.
    #[default]
    Proportional,
    AllLiquid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentFlag {
    Applied,
    /// Equity at `(p̄, q̄)` was not positive; the firm was left untouched.
    SkippedNonpositiveEquity,
    /// A negative adjustment was cut short so nothing went negative.
    Floored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirmAdjustment {
    /// Solution of the leverage equation.
    pub target: f64,
    /// Amount actually added to both sides of the balance sheet.
    pub applied: f64,
    pub flag: AdjustmentFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub system: FinancialSystem,
    pub adjustments: Vec<FirmAdjustment>,
}

/// Adds `w_i` to each firm's outside obligation and to its assets so that
/// `(p̄_i + w_i) / equity_i = λ^max_i` at full payments and prices `q̄`.
pub fn apply_leverage_counterfactual(
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    max_price: &[f64],
    split: AssetSplit,
) -> Result<Counterfactual> {
    if max_price.len() != system.m() {
        return Err(Error::Dimension("maximum prices do not match the assets".into()));
    }
    let n = system.n();
    let mut liabilities = system.liabilities().clone();
    let mut liquid = system.liquid().to_vec();
    let mut illiquid = system.illiquid().clone();
    let mut adjustments = Vec::with_capacity(n);
    for firm in 1..=n {
        let pos = system.position(firm, &rl.total, max_price, rl);
        let equity = pos.wealth();
        if equity <= 0.0 {
            adjustments.push(FirmAdjustment {
                target: f64::NAN,
                applied: 0.0,
                flag: AdjustmentFlag::SkippedNonpositiveEquity,
            });
            continue;
        }
        let target = pos.leverage_cap * equity - pos.obligations;
        let assets = pos.liquid + pos.illiquid_value;
        let removable = match split {
            AssetSplit::Proportional if assets > 0.0 => assets,
            _ => pos.liquid,
        };
        let floor = -(liabilities[(firm, 0)].min(removable));
        let applied = target.max(floor);
        let flag = if applied > target {
            AdjustmentFlag::Floored
        } else {
            AdjustmentFlag::Applied
        };
        let owed = liabilities[(firm, 0)] + applied;
        liabilities.row_mut(firm)[0] = owed.max(0.0);
        let holdings = illiquid.row_mut(firm - 1);
        match split {
            AssetSplit::AllLiquid => liquid[firm - 1] += applied,
            AssetSplit::Proportional if assets > 0.0 => {
                let cash = liquid[firm - 1];
                liquid[firm - 1] = (cash + applied * cash / assets).max(0.0);
                if pos.illiquid_value > 0.0 {
                    let f = 1.0 + applied / assets;
                    for s in holdings.iter_mut() {
                        *s = (*s * f).max(0.0);
                    }
                }
            }
            AssetSplit::Proportional => liquid[firm - 1] += applied,
        }
        if liquid[firm - 1] < 0.0 {
            liquid[firm - 1] = 0.0;
        }
        adjustments.push(FirmAdjustment { target, applied, flag });
    }
    let system = FinancialSystem::new(liabilities, liquid, illiquid, system.leverage_cap().to_vec())?;
    Ok(Counterfactual { system, adjustments })
}

/// Scales every holding by `1 - beta`.
pub fn apply_shock(system: &FinancialSystem, beta: f64) -> Result<FinancialSystem> {
    unit_interval("beta", beta)?;
    let keep = 1.0 - beta;
    let liquid = system.liquid().iter().map(|x| x * keep).collect();
    let illiquid = system.illiquid().map(|s| s * keep);
    system.with_holdings(liquid, illiquid)
}
