//! The clearing map `φ(p, q)` and its fixed points under a known liquidation strategy.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::demand::InverseDemand;
use crate::error::{Error, Result};
use crate::liquidation::{minimal_liquidation_residuals, LiquidationStrategy, Requirement};
use crate::model::{aggregate_sales, max_abs_diff, ClearingState, FinancialSystem, RelativeLiabilities};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Oscillating,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Oscillating => "oscillating",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Absolute tolerance; `None` means `1e-8 * (1 + max(p̄, q̄))`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Restart with `damping` when plain iteration cycles on a non-monotone strategy.
    pub retry_damped: bool,
    pub damping: f64,
    /// How many recent iterates are compared against when detecting cycles.
    pub history: usize,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: 10_000,
            retry_damped: true,
            damping: 0.5,
            history: 16,
            record_trace: false,
        }
    }
}

impl SolverOptions {
    pub fn tolerance(&self, rl: &RelativeLiabilities, max_price: &[f64]) -> f64 {
        self.tol.unwrap_or_else(|| default_tolerance(rl, max_price))
    }
}

pub fn default_tolerance(rl: &RelativeLiabilities, max_price: &[f64]) -> f64 {
    let qmax = max_price.iter().copied().fold(0.0, f64::max);
    1e-8 * (1.0 + rl.max_obligation().max(qmax))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingSolution {
    /// `(p*, q*, γ(p*, q*))`.
    pub state: ClearingState,
    pub residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Relaxation factor of the final run (1 for plain iteration).
    pub relaxation: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<ClearingState>,
}

impl ClearingSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// `p̄ ∧ (x + S q + A^T p)` with the outside node pinned at 0.
pub(crate) fn payment_update(
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    payments: &[f64],
    prices: &[f64],
) -> Vec<f64> {
    let mut next = vec![0.0; system.n() + 1];
    for (firm, p) in next.iter_mut().enumerate().skip(1) {
        let pos = system.position(firm, payments, prices, rl);
        *p = pos
            .obligations
            .min(pos.liquid + pos.illiquid_value + pos.incoming)
            .max(0.0);
    }
    next
}

pub(crate) fn state_distance(a: &ClearingState, b: &ClearingState) -> f64 {
    max_abs_diff(&a.payments, &b.payments).max(max_abs_diff(&a.prices, &b.prices))
}

/// A system, its inverse demand function and a liquidation rule.
#[derive(Debug, Clone, Copy)]
pub struct ClearingProblem<'a> {
    pub system: &'a FinancialSystem,
    pub rl: &'a RelativeLiabilities,
    pub demand: &'a InverseDemand,
    pub strategy: LiquidationStrategy,
    pub requirement: Requirement,
}

impl<'a> ClearingProblem<'a> {
    pub fn new(
        system: &'a FinancialSystem,
        rl: &'a RelativeLiabilities,
        demand: &'a InverseDemand,
        strategy: LiquidationStrategy,
    ) -> Result<Self> {
        if demand.m() != system.m() {
            return Err(Error::Dimension(format!(
                "inverse demand prices {} assets, system holds {}",
                demand.m(),
                system.m()
            )));
        }
        if rl.total.len() != system.n() + 1 {
            return Err(Error::Dimension("relative liabilities do not match the system".into()));
        }
        strategy.check(Some(system.m()))?;
        Ok(Self {
            system,
            rl,
            demand,
            strategy,
            requirement: Requirement::Leverage,
        })
    }

    /// Same problem with firms liquidating only to cover cash shortfalls.
    pub fn fire_sale(self) -> Self {
        Self {
            requirement: Requirement::FireSale,
            ..self
        }
    }

    pub fn max_price(&self) -> &[f64] {
        self.demand.max_price()
    }

    pub fn top(&self) -> ClearingState {
        ClearingState::top(self.rl, self.max_price(), self.system.m())
    }

    /// `(0, F(Σ_i s_i))`, below every fixed point.
    pub fn bottom(&self) -> ClearingState {
        let mut state = self.top();
        state.payments.fill(0.0);
        state.prices = self.demand.prices(&self.system.total_supply());
        state
    }

    pub fn tolerance(&self, opts: &SolverOptions) -> f64 {
        opts.tolerance(self.rl, self.max_price())
    }

    fn check_state(&self, state: &ClearingState) -> Result<()> {
        if state.payments.len() != self.system.n() + 1 || state.prices.len() != self.system.m() {
            return Err(Error::Dimension("state does not match the system".into()));
        }
        Ok(())
    }

    /// One application of `φ`; the returned liquidations are `γ` at the input state.
    pub fn step(&self, state: &ClearingState) -> Result<ClearingState> {
        self.check_state(state)?;
        let gamma =
            self.strategy
                .liquidate_with(self.requirement, &state.payments, &state.prices, self.rl, self.system)?;
        let payments = payment_update(self.system, self.rl, &state.payments, &state.prices);
        let prices = self.demand.prices(&aggregate_sales(self.system, &gamma));
        Ok(ClearingState {
            payments,
            prices,
            liquidations: gamma,
        })
    }

    /// `‖φ(p, q) - (p, q)‖_∞`.
    pub fn residual(&self, state: &ClearingState) -> Result<f64> {
        Ok(state_distance(&self.step(state)?, state))
    }

    /// Picard iteration from `(p̄, q̄)`; the greatest fixed point for monotone strategies.
    pub fn solve(&self, opts: &SolverOptions) -> Result<ClearingSolution> {
        self.solve_from(self.top(), opts)
    }

    /// Picard iteration from `(0, F(Σ s_i))`; the least fixed point for monotone strategies.
    pub fn solve_least(&self, opts: &SolverOptions) -> Result<ClearingSolution> {
        self.solve_from(self.bottom(), opts)
    }

    pub fn solve_from(&self, start: ClearingState, opts: &SolverOptions) -> Result<ClearingSolution> {
        self.check_state(&start)?;
        let first = self.iterate(start.clone(), 1.0, opts, opts.max_iter)?;
        if first.status != SolveStatus::Oscillating || !opts.retry_damped || self.strategy.is_monotone() {
            return Ok(first);
        }
        let budget = opts.max_iter.saturating_sub(first.iterations);
        let mut damped = self.iterate(start, opts.damping, opts, budget)?;
        damped.iterations += first.iterations;
        Ok(damped)
    }

    fn iterate(
        &self,
        mut state: ClearingState,
        relaxation: f64,
        opts: &SolverOptions,
        budget: usize,
    ) -> Result<ClearingSolution> {
        let tol = self.tolerance(opts);
        let mut history: VecDeque<ClearingState> = VecDeque::with_capacity(opts.history + 1);
        let mut trace = Vec::new();
        if opts.record_trace {
            trace.push(state.clone());
        }
        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;
        while iterations < budget {
            iterations += 1;
            let mapped = self.step(&state)?;
            let next = if relaxation == 1.0 {
                mapped
            } else {
                blend(&state, &mapped, relaxation)
            };
            let step = state_distance(&next, &state);
            let cycled = history
                .iter()
                .rev()
                .skip(1)
                .any(|old| state_distance(old, &next) <= tol);
            history.push_back(state);
            if history.len() > opts.history {
                history.pop_front();
            }
            state = next;
            if opts.record_trace {
                trace.push(state.clone());
            }
            if step <= tol && self.residual(&state)? <= tol {
                status = SolveStatus::Converged;
                break;
            }
            if cycled && step > tol {
                status = SolveStatus::Oscillating;
                break;
            }
        }
        let residual = self.residual(&state)?;
        state.liquidations =
            self.strategy
                .liquidate_with(self.requirement, &state.payments, &state.prices, self.rl, self.system)?;
        Ok(ClearingSolution {
            state,
            residual,
            iterations,
            status,
            relaxation,
            trace,
        })
    }

    /// Minimal-liquidation residual per firm at a state.
    pub fn liquidation_residuals(&self, state: &ClearingState) -> Vec<f64> {
        minimal_liquidation_residuals(
            &state.liquidations,
            &state.payments,
            &state.prices,
            self.rl,
            self.system,
        )
    }
}

fn blend(old: &ClearingState, new: &ClearingState, weight: f64) -> ClearingState {
    let mix =
        |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - weight) * x + weight * y).collect() };
    ClearingState {
        payments: mix(&old.payments, &new.payments),
        prices: mix(&old.prices, &new.prices),
        liquidations: new.liquidations.clone(),
    }
}

pub fn clearing_step(
    state: &ClearingState,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    strategy: LiquidationStrategy,
) -> Result<ClearingState> {
    ClearingProblem::new(system, rl, demand, strategy)?.step(state)
}

pub fn residual(
    state: &ClearingState,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    strategy: LiquidationStrategy,
) -> Result<f64> {
    ClearingProblem::new(system, rl, demand, strategy)?.residual(state)
}

pub fn solve_picard(
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    strategy: LiquidationStrategy,
    opts: &SolverOptions,
) -> Result<ClearingSolution> {
    ClearingProblem::new(system, rl, demand, strategy)?.solve(opts)
}

/// Writes iterates as CSV with header `iter,p_1..p_n,q_1..q_m` and, when `with_gamma`,
/// flattened `g_i_k` columns.
pub fn write_trace<W: Write>(out: W, trace: &[ClearingState], with_gamma: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let Some(first) = trace.first() else {
        return Ok(());
    };
    let n = first.payments.len() - 1;
    let m = first.prices.len();
    let mut header = vec!["iter".to_string()];
    header.extend((1..=n).map(|i| format!("p_{i}")));
    header.extend((1..=m).map(|k| format!("q_{k}")));
    if with_gamma {
        for i in 1..=n {
            header.extend((1..=m).map(|k| format!("g_{i}_{k}")));
        }
    }
    wtr.write_record(&header)?;
    for (it, state) in trace.iter().enumerate() {
        let mut row = vec![it.to_string()];
        row.extend(state.payments[1..].iter().map(f64::to_string));
        row.extend(state.prices.iter().map(f64::to_string));
        if with_gamma {
            row.extend(state.liquidations.as_slice().iter().map(f64::to_string));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
