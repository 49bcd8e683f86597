//! Closed-form liquidation strategies `γ(p, q)`.
//!
//! Every strategy returns the number of units each firm *wishes* to sell; the
//! market only sees `s_i ∧ γ_i`. The smoothed price-ranked strategies follow
//! the weighted-block recursion: block `k` sells proportionally across the
//! assets weighted by `h̄_ε(k, ·)`, and the requirement left over after each
//! block feeds the next.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{positive_part, FinancialSystem, FirmPosition, Matrix, RelativeLiabilities};

/// Smoothing `h_ε`, continuous and strictly decreasing with `h_ε(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// `exp(-z / ε)`
    #[default]
    Exponential,
    /// `1 / (1 + z / ε)`
    Rational,
}

impl Smoothing {
    pub fn eval(self, z: f64, epsilon: f64) -> f64 {
        match self {
            Smoothing::Exponential => (-z / epsilon).exp(),
            Smoothing::Rational => 1.0 / (1.0 + z / epsilon),
        }
    }
}

/// Which weighted block the carried-over requirement is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockIndexing {
    /// Remainder after block `k-1` uses `Σ_{l=k-1}^m h̄(k-1,l) s_[l] q_[l]` (best-first) and
    /// `Σ_{l=1}^{k+1} h̄(k+1,l) s_[l] q_[l]` (worst-first).
    #[default]
    AsPrinted,
    /// Drops the block's own leading asset from that sum: `l = k..m` and `l = 1..k`.
    Shifted,
}

/// How the required proceeds are derived from a firm's balance sheet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    /// Cash shortfall net of the leverage allowance `λ^max_i` times equity.
    #[default]
    Leverage,
    /// Cash shortfall only; leverage caps are ignored.
    FireSale,
}

impl Requirement {
    /// Requirement before the outer positive part.
    pub fn net(self, pos: &FirmPosition) -> f64 {
        match self {
            Requirement::Leverage => pos.net_requirement(),
            Requirement::FireSale => pos.shortfall(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiquidationStrategy {
    SingleAsset,
    Proportional,
    BestFirst {
        epsilon: f64,
        #[serde(default)]
        smoothing: Smoothing,
        #[serde(default)]
        indexing: BlockIndexing,
    },
    WorstFirst {
        epsilon: f64,
        #[serde(default)]
        smoothing: Smoothing,
        #[serde(default)]
        indexing: BlockIndexing,
    },
}

impl LiquidationStrategy {
    pub fn best_first(epsilon: f64) -> Self {
        LiquidationStrategy::BestFirst {
            epsilon,
            smoothing: Smoothing::default(),
            indexing: BlockIndexing::default(),
        }
    }

    pub fn worst_first(epsilon: f64) -> Self {
        LiquidationStrategy::WorstFirst {
            epsilon,
            smoothing: Smoothing::default(),
            indexing: BlockIndexing::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LiquidationStrategy::SingleAsset => "single_asset",
            LiquidationStrategy::Proportional => "proportional",
            LiquidationStrategy::BestFirst { .. } => "best_first",
            LiquidationStrategy::WorstFirst { .. } => "worst_first",
        }
    }

    /// Single-asset and proportional liquidation are nonincreasing in `(p, q)`.
    pub fn is_monotone(&self) -> bool {
        matches!(
            self,
            LiquidationStrategy::SingleAsset | LiquidationStrategy::Proportional
        )
    }

    /// Parses `kind[:eps]`, e.g. `proportional` or `worst_first:0.01`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, eps) = match text.split_once(':') {
            Some((k, e)) => (k, Some(e)),
            None => (text, None),
        };
        let kind = kind.trim().replace('-', "_");
        let epsilon = || -> Result<f64> {
            let raw = eps.ok_or_else(|| Error::Input(format!("`{kind}` needs an epsilon")))?;
            raw.trim()
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("bad epsilon `{raw}`")))
        };
        let strategy = match kind.as_str() {
            "single_asset" | "single" => LiquidationStrategy::SingleAsset,
            "proportional" => LiquidationStrategy::Proportional,
            "best_first" => Self::best_first(epsilon()?),
            "worst_first" => Self::worst_first(epsilon()?),
            other => return Err(Error::Input(format!("unknown strategy `{other}`"))),
        };
        if eps.is_some() && strategy.is_monotone() {
            return Err(Error::Input(format!("`{kind}` takes no epsilon")));
        }
        strategy.check(None)?;
        Ok(strategy)
    }

    /// Validates parameters, and the asset count when `m` is given.
    pub fn check(&self, m: Option<usize>) -> Result<()> {
        match *self {
            LiquidationStrategy::BestFirst { epsilon, .. } | LiquidationStrategy::WorstFirst { epsilon, .. }
                if !(epsilon > 0.0 && epsilon.is_finite()) =>
            {
                Err(Error::StrategyMismatch {
                    strategy: self.name(),
                    requirement: "a positive finite epsilon".into(),
                })
            }
            LiquidationStrategy::SingleAsset if m.is_some_and(|m| m != 1) => Err(Error::StrategyMismatch {
                strategy: self.name(),
                requirement: format!("exactly one illiquid asset, system has {}", m.unwrap_or(0)),
            }),
            _ => Ok(()),
        }
    }

    /// Liquidation matrix `γ(p, q)` for every firm.
    pub fn liquidate(
        &self,
        payments: &[f64],
        prices: &[f64],
        rl: &RelativeLiabilities,
        system: &FinancialSystem,
    ) -> Result<Matrix> {
        self.liquidate_with(Requirement::Leverage, payments, prices, rl, system)
    }

    pub fn liquidate_with(
        &self,
        requirement: Requirement,
        payments: &[f64],
        prices: &[f64],
        rl: &RelativeLiabilities,
        system: &FinancialSystem,
    ) -> Result<Matrix> {
        self.check(Some(system.m()))?;
        if prices.len() != system.m() || payments.len() != system.n() + 1 {
            return Err(Error::Dimension("state does not match the system".into()));
        }
        let mut gamma = Matrix::zeros(system.n(), system.m());
        for firm in 1..=system.n() {
            let net = requirement.net(&system.position(firm, payments, prices, rl));
            let holdings = system.holdings(firm);
            let row = gamma.row_mut(firm - 1);
            match *self {
                LiquidationStrategy::SingleAsset => single_asset(net, holdings, prices, row),
                LiquidationStrategy::Proportional => proportional(net, holdings, prices, row),
                LiquidationStrategy::BestFirst {
                    epsilon,
                    smoothing,
                    indexing,
                } => best_first(net, holdings, prices, epsilon, smoothing, indexing, row),
                LiquidationStrategy::WorstFirst {
                    epsilon,
                    smoothing,
                    indexing,
                } => worst_first(net, holdings, prices, epsilon, smoothing, indexing, row),
            }
        }
        Ok(gamma)
    }
}

/// When a positive requirement meets holdings worth nothing, everything is sold.
fn sell_everything_if_worthless(requirement: f64, holdings: &[f64], prices: &[f64], out: &mut [f64]) -> bool {
    let value: f64 = holdings.iter().zip(prices).map(|(s, q)| s * q).sum();
    if requirement > 0.0 && value <= 0.0 {
        out.copy_from_slice(holdings);
        true
    } else {
        false
    }
}

fn single_asset(net: f64, holdings: &[f64], prices: &[f64], out: &mut [f64]) {
    let need = positive_part(net);
    if need == 0.0 {
        out[0] = 0.0;
    } else if prices[0] > 0.0 {
        out[0] = need / prices[0];
    } else {
        out[0] = holdings[0];
    }
}

fn proportional(net: f64, holdings: &[f64], prices: &[f64], out: &mut [f64]) {
    let need = positive_part(net);
    if need == 0.0 {
        out.fill(0.0);
        return;
    }
    if sell_everything_if_worthless(need, holdings, prices, out) {
        return;
    }
    let value: f64 = holdings.iter().zip(prices).map(|(s, q)| s * q).sum();
    for (g, s) in out.iter_mut().zip(holdings) {
        *g = s * need / value;
    }
}

/// Asset indices by descending price; ties keep ascending index.
pub fn price_ranking(prices: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..prices.len()).collect();
    order.sort_by(|&a, &b| prices[b].total_cmp(&prices[a]));
    order
}

fn best_first(
    net: f64,
    holdings: &[f64],
    prices: &[f64],
    epsilon: f64,
    smoothing: Smoothing,
    indexing: BlockIndexing,
    out: &mut [f64],
) {
    out.fill(0.0);
    let need = positive_part(net);
    if need == 0.0 || sell_everything_if_worthless(need, holdings, prices, out) {
        return;
    }
    let m = prices.len();
    let order = price_ranking(prices);
    let q: Vec<f64> = order.iter().map(|&k| prices[k]).collect();
    let s: Vec<f64> = order.iter().map(|&k| holdings[k]).collect();
    let v: Vec<f64> = s.iter().zip(&q).map(|(a, b)| a * b).collect();
    let h = |z: f64| smoothing.eval(z, epsilon);

    // hbar[k][l] defined for l >= k
    let mut hbar = vec![vec![0.0; m]; m];
    for l in 0..m {
        // running Σ_{α<k} h(q_α - q_l) Π_{β<α} (1 - h(q_β - q_l))
        let mut covered = 0.0;
        let mut survive = 1.0;
        for k in 0..=l {
            hbar[k][l] = h(q[k] - q[l]) * (1.0 - covered);
            let hk = h(q[k] - q[l]);
            covered += hk * survive;
            survive *= 1.0 - hk;
        }
    }
    let block = |k: usize, from: usize| -> f64 { (from..m).map(|l| hbar[k][l] * v[l]).sum() };

    let mut g = vec![0.0; m];
    g[0] = net;
    for k in 1..m {
        let from = match indexing {
            BlockIndexing::AsPrinted => k - 1,
            BlockIndexing::Shifted => k,
        };
        let d = block(k - 1, from);
        g[k] = if d > 0.0 {
            g[k - 1] - (positive_part(g[k - 1]) / d).min(1.0) * d
        } else {
            g[k - 1]
        };
    }
    for k in 0..m {
        let mut units = 0.0;
        for kh in 0..=k {
            let d = block(kh, kh);
            if d > 0.0 {
                units += hbar[kh][k] * s[k] * positive_part(g[kh]) / d;
            }
        }
        out[order[k]] = units;
    }
}

fn worst_first(
    net: f64,
    holdings: &[f64],
    prices: &[f64],
    epsilon: f64,
    smoothing: Smoothing,
    indexing: BlockIndexing,
    out: &mut [f64],
) {
    out.fill(0.0);
    let need = positive_part(net);
    if need == 0.0 || sell_everything_if_worthless(need, holdings, prices, out) {
        return;
    }
    let m = prices.len();
    let order = price_ranking(prices);
    let q: Vec<f64> = order.iter().map(|&k| prices[k]).collect();
    let s: Vec<f64> = order.iter().map(|&k| holdings[k]).collect();
    let v: Vec<f64> = s.iter().zip(&q).map(|(a, b)| a * b).collect();
    let h = |z: f64| smoothing.eval(z, epsilon);

    // hbar[k][l] defined for l <= k
    let mut hbar = vec![vec![0.0; m]; m];
    for l in 0..m {
        // running Σ_{α>k} h(q_l - q_α) Π_{β>α} (1 - h(q_l - q_β)), built from the cheap end
        let mut covered = 0.0;
        let mut survive = 1.0;
        for k in (l..m).rev() {
            hbar[k][l] = h(q[l] - q[k]) * (1.0 - covered);
            let hk = h(q[l] - q[k]);
            covered += hk * survive;
            survive *= 1.0 - hk;
        }
    }
    let block = |k: usize, to: usize| -> f64 { (0..=to).map(|l| hbar[k][l] * v[l]).sum() };

    let mut g = vec![0.0; m];
    g[m - 1] = net;
    for k in (0..m - 1).rev() {
        let to = match indexing {
            BlockIndexing::AsPrinted => k + 1,
            BlockIndexing::Shifted => k,
        };
        let d = block(k + 1, to);
        g[k] = if d > 0.0 {
            g[k + 1] - (positive_part(g[k + 1]) / d).min(1.0) * d
        } else {
            g[k + 1]
        };
    }
    for k in 0..m {
        let mut units = 0.0;
        for kh in k..m {
            let d = block(kh, kh);
            if d > 0.0 {
                units += hbar[kh][k] * s[k] * positive_part(g[kh]) / d;
            }
        }
        out[order[k]] = units;
    }
}

/// `|q^T (s_i ∧ γ_i) - (q^T s_i) ∧ Λ_i|` for each firm.
pub fn minimal_liquidation_residuals(
    gamma: &Matrix,
    payments: &[f64],
    prices: &[f64],
    rl: &RelativeLiabilities,
    system: &FinancialSystem,
) -> Vec<f64> {
    (1..=system.n())
        .map(|firm| {
            let pos = system.position(firm, payments, prices, rl);
            let proceeds: f64 = system
                .holdings(firm)
                .iter()
                .zip(gamma.row(firm - 1))
                .zip(prices)
                .map(|((s, g), q)| s.min(*g) * q)
                .sum();
            (proceeds - pos.illiquid_value.min(pos.liquidation_requirement())).abs()
        })
        .collect()
}

/// Per-firm pass/fail of the minimal liquidation condition at absolute tolerance `tol`.
pub fn verify_minimal_liquidation(
    gamma: &Matrix,
    payments: &[f64],
    prices: &[f64],
    rl: &RelativeLiabilities,
    system: &FinancialSystem,
    tol: f64,
) -> Vec<bool> {
    minimal_liquidation_residuals(gamma, payments, prices, rl, system)
        .into_iter()
        .map(|r| r <= tol)
        .collect()
}
