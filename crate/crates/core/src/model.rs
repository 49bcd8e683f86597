//! Financial-system data model and balance-sheet arithmetic.
//!
//! Nodes are numbered `0..=n`. Node 0 is the economy outside the network: it
//! receives obligations but owes nothing. Firms are nodes `1..=n`; per-firm
//! vectors (`liquid`, rows of `illiquid`, `leverage_cap`) are stored densely
//! with firm `i` at position `i - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute entrywise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn positive_part(v: f64) -> f64 {
    v.max(0.0)
}

fn check_entries(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        Some(v) => Err(Error::invalid(
            field,
            format!("entries must be finite and nonnegative, found {v}"),
        )),
        None => Ok(()),
    }
}

/// `n` firms plus the outside node, holding cash and `m` illiquid assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSystem", into = "RawSystem")]
pub struct FinancialSystem {
    liabilities: Matrix,
    liquid: Vec<f64>,
    illiquid: Matrix,
    leverage_cap: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSystem {
    n: usize,
    m: usize,
    liabilities: Matrix,
    liquid: Vec<f64>,
    illiquid: Matrix,
    leverage_cap: Vec<f64>,
}

impl TryFrom<RawSystem> for FinancialSystem {
    type Error = Error;

    fn try_from(raw: RawSystem) -> Result<Self> {
        let sys = FinancialSystem::new(raw.liabilities, raw.liquid, raw.illiquid, raw.leverage_cap)?;
        if sys.n() != raw.n || sys.m() != raw.m {
            return Err(Error::Dimension(format!(
                "declared n={}, m={} but matrices give n={}, m={}",
                raw.n,
                raw.m,
                sys.n(),
                sys.m()
            )));
        }
        Ok(sys)
    }
}

impl From<FinancialSystem> for RawSystem {
    fn from(sys: FinancialSystem) -> Self {
        RawSystem {
            n: sys.n(),
            m: sys.m(),
            liabilities: sys.liabilities,
            liquid: sys.liquid,
            illiquid: sys.illiquid,
            leverage_cap: sys.leverage_cap,
        }
    }
}

impl FinancialSystem {
    pub fn new(liabilities: Matrix, liquid: Vec<f64>, illiquid: Matrix, leverage_cap: Vec<f64>) -> Result<Self> {
        let n = liquid.len();
        if liabilities.rows() != n + 1 || liabilities.cols() != n + 1 {
            return Err(Error::Dimension(format!(
                "liabilities must be {0}x{0}, got {1}x{2}",
                n + 1,
                liabilities.rows(),
                liabilities.cols()
            )));
        }
        if illiquid.rows() != n {
            return Err(Error::Dimension(format!(
                "illiquid holdings need {n} rows, got {}",
                illiquid.rows()
            )));
        }
        if leverage_cap.len() != n {
            return Err(Error::Dimension(format!(
                "leverage caps need {n} entries, got {}",
                leverage_cap.len()
            )));
        }
        check_entries("liabilities", liabilities.as_slice())?;
        check_entries("liquid", &liquid)?;
        check_entries("illiquid", illiquid.as_slice())?;
        check_entries("leverage_cap", &leverage_cap)?;
        if let Some(i) = (0..=n).find(|&i| liabilities[(i, i)] != 0.0) {
            return Err(Error::invalid(
                "liabilities",
                format!("node {i} has an obligation to itself"),
            ));
        }
        if liabilities.row(0).iter().any(|&v| v != 0.0) {
            return Err(Error::invalid("liabilities", "the outside node cannot owe anything"));
        }
        Ok(Self {
            liabilities,
            liquid,
            illiquid,
            leverage_cap,
        })
    }

    pub fn n(&self) -> usize {
        self.liquid.len()
    }

    pub fn m(&self) -> usize {
        self.illiquid.cols()
    }

    pub fn liabilities(&self) -> &Matrix {
        &self.liabilities
    }

    pub fn liquid(&self) -> &[f64] {
        &self.liquid
    }

    pub fn illiquid(&self) -> &Matrix {
        &self.illiquid
    }

    pub fn leverage_cap(&self) -> &[f64] {
        &self.leverage_cap
    }

    /// Holdings `s_i` of firm `i` (node index, `1..=n`).
    pub fn holdings(&self, firm: usize) -> &[f64] {
        self.illiquid.row(firm - 1)
    }

    /// Total units of each asset held across the system.
    pub fn total_supply(&self) -> Vec<f64> {
        self.illiquid.column_sums()
    }

    pub fn check_firm(&self, firm: usize) -> Result<()> {
        if firm == 0 || firm > self.n() {
            Err(Error::IndexOutOfRange {
                index: firm,
                n: self.n(),
            })
        } else {
            Ok(())
        }
    }

    pub fn with_leverage_cap(&self, leverage_cap: Vec<f64>) -> Result<Self> {
        Self::new(
            self.liabilities.clone(),
            self.liquid.clone(),
            self.illiquid.clone(),
            leverage_cap,
        )
    }

    pub fn with_uniform_leverage_cap(&self, cap: f64) -> Result<Self> {
        self.with_leverage_cap(vec![cap; self.n()])
    }

    pub(crate) fn with_holdings(&self, liquid: Vec<f64>, illiquid: Matrix) -> Result<Self> {
        Self::new(self.liabilities.clone(), liquid, illiquid, self.leverage_cap.clone())
    }

    /// Absolute currency tolerance `1e-9 * (1 + max obligation)`.
    pub fn currency_tol(&self, rl: &RelativeLiabilities) -> f64 {
        1e-9 * (1.0 + rl.max_obligation())
    }

    /// Pro-rata payment shares and total obligations.
    pub fn relative_liabilities(&self) -> RelativeLiabilities {
        derive_relative_liabilities(self)
    }

    /// Balance-sheet position of `firm` at payments `p` and prices `q`.
    pub fn position(&self, firm: usize, payments: &[f64], prices: &[f64], rl: &RelativeLiabilities) -> FirmPosition {
        let holdings = self.holdings(firm);
        FirmPosition {
            obligations: rl.total[firm],
            liquid: self.liquid[firm - 1],
            incoming: rl.incoming(firm, payments),
            illiquid_value: holdings.iter().zip(prices).map(|(s, q)| s * q).sum(),
            payment: payments[firm],
            leverage_cap: self.leverage_cap[firm - 1],
        }
    }
}

/// Total obligations `p̄` and the row-stochastic matrix of payment shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeLiabilities {
    pub total: Vec<f64>,
    pub relative: Matrix,
}

impl RelativeLiabilities {
    /// `Σ_j a_ji p_j`: payments flowing into node `i`.
    pub fn incoming(&self, node: usize, payments: &[f64]) -> f64 {
        (0..self.total.len())
            .map(|j| self.relative[(j, node)] * payments[j])
            .sum()
    }

    pub fn max_obligation(&self) -> f64 {
        self.total.iter().copied().fold(0.0, f64::max)
    }

    /// Share of firm `j`'s payments that leaves the network.
    pub fn outside_share(&self, firm: usize) -> f64 {
        self.relative[(firm, 0)]
    }
}

pub fn derive_relative_liabilities(system: &FinancialSystem) -> RelativeLiabilities {
    let l = system.liabilities();
    let nodes = l.rows();
    let total = l.row_sums();
    let mut relative = Matrix::zeros(nodes, nodes);
    for (i, &t) in total.iter().enumerate() {
        let row = relative.row_mut(i);
        if t > 0.0 {
            for (a, &lij) in row.iter_mut().zip(l.row(i)) {
                *a = lij / t;
            }
        } else {
            row.fill(1.0 / nodes as f64);
        }
    }
    RelativeLiabilities { total, relative }
}

/// Candidate payments, prices and liquidations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingState {
    /// Length `n + 1`; entry 0 is the outside node and stays 0.
    pub payments: Vec<f64>,
    pub prices: Vec<f64>,
    /// `n x m` units each firm wishes to sell.
    pub liquidations: Matrix,
}

impl ClearingState {
    /// `(p̄, q̄, 0)`.
    pub fn top(rl: &RelativeLiabilities, max_price: &[f64], m: usize) -> Self {
        let n = rl.total.len() - 1;
        Self {
            payments: rl.total.clone(),
            prices: max_price.to_vec(),
            liquidations: Matrix::zeros(n, m),
        }
    }

    /// Checks `0 <= p <= p̄`, `0 <= q <= q̄`, `γ >= 0` up to `tol`.
    pub fn check_bounds(&self, rl: &RelativeLiabilities, max_price: &[f64], tol: f64) -> Result<()> {
        if self.payments.len() != rl.total.len() || self.prices.len() != max_price.len() {
            return Err(Error::Dimension("state does not match the system".into()));
        }
        let p_ok = self
            .payments
            .iter()
            .zip(&rl.total)
            .all(|(p, pbar)| *p >= -tol && *p <= pbar + tol);
        let q_ok = self
            .prices
            .iter()
            .zip(max_price)
            .all(|(q, qbar)| *q >= -tol && *q <= qbar + tol);
        let g_ok = self.liquidations.as_slice().iter().all(|g| *g >= -tol);
        if p_ok && q_ok && g_ok {
            Ok(())
        } else {
            Err(Error::invalid("state", "outside [0,p̄]x[0,q̄]x[0,∞)"))
        }
    }

    /// Units actually sold: `s_i ∧ γ_i` summed over firms.
    pub fn units_sold(&self, system: &FinancialSystem) -> Vec<f64> {
        aggregate_sales(system, &self.liquidations)
    }
}

pub(crate) fn aggregate_sales(system: &FinancialSystem, liquidations: &Matrix) -> Vec<f64> {
    let mut sold = vec![0.0; system.m()];
    for i in 1..=system.n() {
        for ((z, s), g) in sold.iter_mut().zip(system.holdings(i)).zip(liquidations.row(i - 1)) {
            *z += s.min(*g);
        }
    }
    sold
}

/// Leverage ratio of a firm; undefined when equity is not positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Leverage {
    Ratio(f64),
    Undefined,
}

impl Leverage {
    pub fn ratio(self) -> Option<f64> {
        match self {
            Leverage::Ratio(r) => Some(r),
            Leverage::Undefined => None,
        }
    }
}

/// One firm's balance sheet at a candidate state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirmPosition {
    /// p̄_i
    pub obligations: f64,
    /// x_i
    pub liquid: f64,
    /// Σ_j a_ji p_j
    pub incoming: f64,
    /// q^T s_i
    pub illiquid_value: f64,
    /// p_i
    pub payment: f64,
    pub leverage_cap: f64,
}

impl FirmPosition {
    /// `t_i = p̄_i ∧ (x_i + Σ_j a_ji p_j)`.
    pub fn cash_payment(&self) -> f64 {
        self.obligations.min(self.liquid + self.incoming)
    }

    pub fn wealth(&self) -> f64 {
        self.liquid + self.illiquid_value + self.incoming - self.payment
    }

    /// Cash shortfall `[p̄_i - (x_i + Σ a_ji p_j)]^+`.
    pub fn shortfall(&self) -> f64 {
        positive_part(self.obligations - (self.liquid + self.incoming))
    }

    /// `[(x_i + q^T s_i + Σ a_ji p_j) - p̄_i]^+`.
    pub fn equity(&self) -> f64 {
        positive_part(self.liquid + self.illiquid_value + self.incoming - self.obligations)
    }

    /// Shortfall net of the leverage allowance, before the outer positive part.
    pub fn net_requirement(&self) -> f64 {
        self.shortfall() - self.leverage_cap * self.equity()
    }

    /// Required liquidation proceeds Λ_i.
    pub fn liquidation_requirement(&self) -> f64 {
        positive_part(self.net_requirement())
    }

    /// `(p̄_i - (t_i + q^T γ_i)) / wealth`, given the cash used and the sale proceeds.
    pub fn leverage_ratio(&self, cash_used: f64, sale_proceeds: f64) -> Leverage {
        let equity = self.wealth();
        if equity > 0.0 {
            Leverage::Ratio((self.obligations - (cash_used + sale_proceeds)) / equity)
        } else {
            Leverage::Undefined
        }
    }
}

pub fn cash_payment(
    firm: usize,
    state: &ClearingState,
    rl: &RelativeLiabilities,
    system: &FinancialSystem,
) -> Result<f64> {
    system.check_firm(firm)?;
    Ok(system.position(firm, &state.payments, &state.prices, rl).cash_payment())
}

pub fn wealth(firm: usize, state: &ClearingState, rl: &RelativeLiabilities, system: &FinancialSystem) -> Result<f64> {
    system.check_firm(firm)?;
    Ok(system.position(firm, &state.payments, &state.prices, rl).wealth())
}

/// Leverage with the proceeds `q^T γ_i` taken from the state's liquidations.
pub fn leverage_ratio(
    firm: usize,
    state: &ClearingState,
    rl: &RelativeLiabilities,
    system: &FinancialSystem,
    cash_used: f64,
) -> Result<Leverage> {
    system.check_firm(firm)?;
    let proceeds: f64 = state
        .liquidations
        .row(firm - 1)
        .iter()
        .zip(&state.prices)
        .map(|(g, q)| g * q)
        .sum();
    Ok(system
        .position(firm, &state.payments, &state.prices, rl)
        .leverage_ratio(cash_used, proceeds))
}

pub fn liquidation_requirement(
    firm: usize,
    state: &ClearingState,
    rl: &RelativeLiabilities,
    system: &FinancialSystem,
) -> Result<f64> {
    system.check_firm(firm)?;
    Ok(system
        .position(firm, &state.payments, &state.prices, rl)
        .liquidation_requirement())
}
