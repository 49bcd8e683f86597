//! Joint clearing payments, prices and Nash liquidation strategies.
//!
//! Each firm chooses how to raise its required proceeds so as to maximise the
//! mark-to-market value of its own portfolio, taking the other firms' sales as
//! given. The map `Ψ(p, q, γ)` updates payments and prices from the incoming
//! `γ` and replaces `γ` with best responses; its fixed points are equilibria.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clearing::{default_tolerance, payment_update, SolveStatus};
use crate::demand::{validate, InverseDemand, ValidationOptions};
use crate::error::{Error, Result};
use crate::model::{aggregate_sales, ClearingState, FinancialSystem, Matrix, RelativeLiabilities};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquilibriumOptions {
    /// Absolute tolerance; `None` means `1e-8 * (1 + max(p̄, q̄))`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub retry_damped: bool,
    pub damping: f64,
    pub history: usize,
    /// Starting points per best response, warm start included.
    pub starts: usize,
    pub ascent_iters: usize,
    /// Finite-difference step relative to the holding size.
    pub fd_step: f64,
    /// Sampled deviations per firm for the Nash certificate.
    pub deviations: usize,
    /// Largest relative improvement a deviation may achieve.
    pub nash_tol: f64,
    pub seed: u64,
    /// Reject inverse demand functions that fail the monotonicity or positivity checks.
    pub validate_demand: bool,
    pub record_trace: bool,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: 2_000,
            retry_damped: true,
            damping: 0.5,
            history: 16,
            starts: 20,
            ascent_iters: 200,
            fd_step: 1e-6,
            deviations: 100,
            nash_tol: 1e-6,
            seed: 0,
            validate_demand: true,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub state: ClearingState,
    pub residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub relaxation: f64,
    /// Largest sampled relative improvement over all firms; 0 when none improves.
    pub nash_gap: f64,
    pub nash_certified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<ClearingState>,
}

impl EquilibriumSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Feasible liquidations of one firm: `g ∈ [0, s]`, `q^T g = c` over positively priced assets.
struct Polytope<'a> {
    holdings: &'a [f64],
    prices: &'a [f64],
    target: f64,
    /// Assets with `q_k > 0` and `s_k > 0`.
    active: Vec<usize>,
}

impl<'a> Polytope<'a> {
    fn new(holdings: &'a [f64], prices: &'a [f64], target: f64) -> Self {
        let active = (0..holdings.len())
            .filter(|&k| holdings[k] > 0.0 && prices[k] > 0.0)
            .collect();
        Self {
            holdings,
            prices,
            target,
            active,
        }
    }

    fn dot(&self, g: &[f64]) -> f64 {
        self.active.iter().map(|&k| self.prices[k] * g[k]).sum()
    }

    fn clamp(&self, k: usize, v: f64) -> f64 {
        v.clamp(0.0, self.holdings[k])
    }

    /// Euclidean projection onto the polytope.
    fn project(&self, y: &[f64]) -> Vec<f64> {
        let m = self.holdings.len();
        let mut g = vec![0.0; m];
        let at = |mu: f64| -> f64 {
            self.active
                .iter()
                .map(|&k| self.prices[k] * self.clamp(k, y[k] - mu * self.prices[k]))
                .sum()
        };
        let mut breaks: Vec<f64> = self
            .active
            .iter()
            .flat_map(|&k| {
                let q = self.prices[k];
                [(y[k] - self.holdings[k]) / q, y[k] / q]
            })
            .collect();
        breaks.sort_by(f64::total_cmp);
        let mut mu = breaks[0];
        let mut prev = (breaks[0], at(breaks[0]));
        for &b in &breaks[1..] {
            let hb = at(b);
            if hb <= self.target {
                let (b0, h0) = prev;
                mu = if h0 > hb {
                    b0 + (h0 - self.target) / (h0 - hb) * (b - b0)
                } else {
                    b
                };
                break;
            }
            prev = (b, hb);
        }
        for &k in &self.active {
            g[k] = self.clamp(k, y[k] - mu * self.prices[k]);
        }
        self.repair(&mut g);
        g
    }

    /// Removes rounding drift from the proceeds constraint.
    fn repair(&self, g: &mut [f64]) {
        for _ in 0..2 {
            let gap = self.target - self.dot(g);
            if gap == 0.0 {
                return;
            }
            for &k in &self.active {
                let q = self.prices[k];
                let room = if gap > 0.0 {
                    (self.holdings[k] - g[k]) * q
                } else {
                    g[k] * q
                };
                if room >= gap.abs() {
                    g[k] = self.clamp(k, g[k] + gap / q);
                    break;
                }
            }
        }
    }

    /// Vertex reached by selling assets in the given order until the target is met.
    fn greedy(&self, order: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.holdings.len()];
        let mut left = self.target;
        for &k in order {
            if left <= 0.0 {
                break;
            }
            let q = self.prices[k];
            let units = self.holdings[k].min(left / q);
            g[k] = units;
            left -= units * q;
        }
        self.repair(&mut g);
        g
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let y: Vec<f64> = self.holdings.iter().map(|s| rng.random::<f64>() * s).collect();
        self.project(&y)
    }

    /// Direction in the constraint's null space, restricted to the active assets.
    fn random_direction(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m = self.holdings.len();
        let mut d = vec![0.0; m];
        for &k in &self.active {
            d[k] = rng.sample::<f64, _>(StandardNormal) * self.holdings[k];
        }
        let qq: f64 = self.active.iter().map(|&k| self.prices[k].powi(2)).sum();
        let qd = self.dot(&d);
        for &k in &self.active {
            d[k] -= qd / qq * self.prices[k];
        }
        d
    }

    /// Feasible step interval `[lo, hi]` for `g + t d` within the box.
    fn chord(&self, g: &[f64], d: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for &k in &self.active {
            if d[k] > 0.0 {
                hi = hi.min((self.holdings[k] - g[k]) / d[k]);
                lo = lo.max(-g[k] / d[k]);
            } else if d[k] < 0.0 {
                hi = hi.min(-g[k] / d[k]);
                lo = lo.max((self.holdings[k] - g[k]) / d[k]);
            }
        }
        (lo.min(0.0), hi.max(0.0))
    }
}

/// `g ↦ s_i^T F(g + others)`.
struct Valuation<'a> {
    demand: &'a InverseDemand,
    holdings: &'a [f64],
    others: &'a [f64],
}

impl Valuation<'_> {
    fn eval(&self, g: &[f64]) -> f64 {
        let z: Vec<f64> = self.others.iter().zip(g).map(|(o, x)| (o + x).max(0.0)).collect();
        self.demand
            .prices(&z)
            .iter()
            .zip(self.holdings)
            .map(|(p, s)| p * s)
            .sum()
    }
}

enum Pinned {
    Nothing,
    Everything,
    Unique(Vec<f64>),
    Free(f64),
}

fn pinned(pos_req: f64, holdings: &[f64], prices: &[f64]) -> Pinned {
    let value: f64 = holdings.iter().zip(prices).map(|(s, q)| s * q).sum();
    if pos_req <= 0.0 {
        return Pinned::Nothing;
    }
    if pos_req >= value {
        return Pinned::Everything;
    }
    let poly = Polytope::new(holdings, prices, pos_req);
    if poly.active.len() == 1 {
        let k = poly.active[0];
        let mut g = vec![0.0; holdings.len()];
        g[k] = (pos_req / prices[k]).min(holdings[k]);
        return Pinned::Unique(g);
    }
    Pinned::Free(pos_req)
}

fn ascend(poly: &Polytope, val: &Valuation, start: Vec<f64>, opts: &EquilibriumOptions) -> (Vec<f64>, f64) {
    let scale = poly.active.iter().map(|&k| poly.holdings[k]).fold(0.0, f64::max);
    let mut g = start;
    let mut fg = val.eval(&g);
    let mut t = 0.1 * scale;
    let floor = 1e-12 * scale;
    for _ in 0..opts.ascent_iters {
        let grad = gradient(poly, val, &g, opts.fd_step);
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let mut moved = false;
        while t > floor {
            let y: Vec<f64> = g.iter().zip(&grad).map(|(x, d)| x + t * d / norm).collect();
            let cand = poly.project(&y);
            let fc = val.eval(&cand);
            if fc > fg {
                g = cand;
                fg = fc;
                t *= 1.5;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (g, fg)
}

fn gradient(poly: &Polytope, val: &Valuation, g: &[f64], rel_step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; g.len()];
    let mut probe = g.to_vec();
    for &k in &poly.active {
        let h = rel_step * poly.holdings[k].max(f64::MIN_POSITIVE);
        let up = poly.clamp(k, g[k] + h);
        let down = poly.clamp(k, g[k] - h);
        if up <= down {
            continue;
        }
        probe[k] = up;
        let fu = val.eval(&probe);
        probe[k] = down;
        let fd = val.eval(&probe);
        probe[k] = g[k];
        grad[k] = (fu - fd) / (up - down);
    }
    grad
}

/// Derivative-free refinement: line searches that trade proceeds between pairs of assets.
fn refine_pairs(poly: &Polytope, val: &Valuation, mut g: Vec<f64>, mut fg: f64) -> (Vec<f64>, f64) {
    const POINTS: usize = 21;
    for _ in 0..20 {
        let mut improved = false;
        for (ia, &a) in poly.active.iter().enumerate() {
            for &b in &poly.active[ia + 1..] {
                let mut d = vec![0.0; g.len()];
                d[a] = 1.0 / poly.prices[a];
                d[b] = -1.0 / poly.prices[b];
                let (mut lo, mut hi) = poly.chord(&g, &d);
                if hi - lo <= 0.0 {
                    continue;
                }
                let base = g.clone();
                let mut best_t = 0.0;
                let mut best_f = fg;
                for _ in 0..40 {
                    let width = hi - lo;
                    for j in 0..POINTS {
                        let t = lo + width * j as f64 / (POINTS - 1) as f64;
                        let cand = step(poly, &base, &d, t);
                        let fc = val.eval(&cand);
                        if fc > best_f {
                            best_f = fc;
                            best_t = t;
                        }
                    }
                    let half = width / (POINTS - 1) as f64;
                    lo = lo.max(best_t - half);
                    hi = hi.min(best_t + half);
                    if hi - lo <= 1e-15 * (1.0 + best_t.abs()) {
                        break;
                    }
                }
                if best_f > fg {
                    g = step(poly, &base, &d, best_t);
                    fg = val.eval(&g);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    (g, fg)
}

fn step(poly: &Polytope, g: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    let mut out: Vec<f64> = g
        .iter()
        .zip(d)
        .enumerate()
        .map(|(k, (x, dk))| if *dk == 0.0 { *x } else { poly.clamp(k, x + t * dk) })
        .collect();
    poly.repair(&mut out);
    out
}

fn starting_points(poly: &Polytope, warm: &[f64], opts: &EquilibriumOptions, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut starts = Vec::with_capacity(opts.starts.max(1));
    starts.push(poly.project(warm));
    let mut by_price = poly.active.clone();
    by_price.sort_by(|&a, &b| poly.prices[b].total_cmp(&poly.prices[a]));
    starts.push(poly.greedy(&by_price));
    by_price.reverse();
    starts.push(poly.greedy(&by_price));
    for (i, &k) in poly.active.iter().enumerate() {
        let mut order = vec![k];
        order.extend(poly.active.iter().copied().filter(|&j| j != k));
        starts.push(poly.greedy(&order));
        if i + 4 >= opts.starts {
            break;
        }
    }
    let value = poly.dot(poly.holdings);
    let share = poly.target / value;
    starts.push(poly.holdings.iter().map(|s| s * share).collect());
    while starts.len() < opts.starts {
        starts.push(poly.random_point(rng));
    }
    starts.truncate(opts.starts.max(1));
    starts
}

/// Best response of `firm` (1-based) against the other firms' liquidations `others`,
/// given as the full `n x m` matrix whose own row is used only as a warm start.
pub fn best_response(
    firm: usize,
    state: &ClearingState,
    others_liquidations: &Matrix,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> Result<Vec<f64>> {
    system.check_firm(firm)?;
    check_inputs(state, system, demand)?;
    if others_liquidations.rows() != system.n() || others_liquidations.cols() != system.m() {
        return Err(Error::Dimension("liquidation matrix does not match the system".into()));
    }
    let sold = aggregate_sales(system, others_liquidations);
    Ok(respond(
        firm,
        state,
        others_liquidations,
        &sold,
        system,
        rl,
        demand,
        opts,
        0,
    ))
}

#[allow(clippy::too_many_arguments)]
fn respond(
    firm: usize,
    state: &ClearingState,
    gamma: &Matrix,
    sold: &[f64],
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
    round: u64,
) -> Vec<f64> {
    let holdings = system.holdings(firm);
    let required = system
        .position(firm, &state.payments, &state.prices, rl)
        .liquidation_requirement();
    match pinned(required, holdings, &state.prices) {
        Pinned::Nothing => vec![0.0; holdings.len()],
        Pinned::Everything => holdings.to_vec(),
        Pinned::Unique(g) => g,
        Pinned::Free(target) => {
            let others = others_sales(system, gamma, sold, firm);
            let poly = Polytope::new(holdings, &state.prices, target);
            let val = Valuation {
                demand,
                holdings,
                others: &others,
            };
            let mut rng = seed::rng(opts.seed, &[1, round, firm as u64]);
            let warm: Vec<f64> = gamma.row(firm - 1).to_vec();
            let mut best: Option<(Vec<f64>, f64)> = None;
            for start in starting_points(&poly, &warm, opts, &mut rng) {
                let (g, f) = ascend(&poly, &val, start, opts);
                if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                    best = Some((g, f));
                }
            }
            let (g, f) = best.expect("at least one start");
            refine_pairs(&poly, &val, g, f).0
        }
    }
}

fn others_sales(system: &FinancialSystem, gamma: &Matrix, sold: &[f64], firm: usize) -> Vec<f64> {
    sold.iter()
        .zip(system.holdings(firm))
        .zip(gamma.row(firm - 1))
        .map(|((z, s), g)| (z - s.min(*g)).max(0.0))
        .collect()
}

fn check_inputs(state: &ClearingState, system: &FinancialSystem, demand: &InverseDemand) -> Result<()> {
    if demand.m() != system.m() {
        return Err(Error::Dimension(format!(
            "inverse demand prices {} assets, system holds {}",
            demand.m(),
            system.m()
        )));
    }
    if state.payments.len() != system.n() + 1
        || state.prices.len() != system.m()
        || state.liquidations.rows() != system.n()
        || state.liquidations.cols() != system.m()
    {
        return Err(Error::Dimension("state does not match the system".into()));
    }
    Ok(())
}

/// One application of `Ψ`: payments and prices from the incoming state, best responses at `(p, q)`.
pub fn psi_step(
    state: &ClearingState,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> Result<ClearingState> {
    check_inputs(state, system, demand)?;
    Ok(psi(state, system, rl, demand, opts, 0))
}

fn psi(
    state: &ClearingState,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
    round: u64,
) -> ClearingState {
    let sold = aggregate_sales(system, &state.liquidations);
    let rows: Vec<Vec<f64>> = (1..=system.n())
        .into_par_iter()
        .map(|firm| respond(firm, state, &state.liquidations, &sold, system, rl, demand, opts, round))
        .collect();
    let mut liquidations = Matrix::zeros(system.n(), system.m());
    for (i, row) in rows.into_iter().enumerate() {
        liquidations.row_mut(i).copy_from_slice(&row);
    }
    ClearingState {
        payments: payment_update(system, rl, &state.payments, &state.prices),
        prices: demand.prices(&sold),
        liquidations,
    }
}

/// Max-norm distance with liquidations valued at the maximum prices.
fn distance(a: &ClearingState, b: &ClearingState, max_price: &[f64]) -> f64 {
    let mut d = crate::clearing::state_distance(a, b);
    for i in 0..a.liquidations.rows() {
        for ((x, y), q) in a.liquidations.row(i).iter().zip(b.liquidations.row(i)).zip(max_price) {
            d = d.max((x - y).abs() * q);
        }
    }
    d
}

fn blend(old: &ClearingState, new: &ClearingState, w: f64) -> ClearingState {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect() };
    let rows = old.liquidations.rows();
    let cols = old.liquidations.cols();
    ClearingState {
        payments: mix(&old.payments, &new.payments),
        prices: mix(&old.prices, &new.prices),
        liquidations: Matrix::from_vec(
            rows,
            cols,
            mix(old.liquidations.as_slice(), new.liquidations.as_slice()),
        )
        .expect("same shape"),
    }
}

pub fn equilibrium_tolerance(rl: &RelativeLiabilities, demand: &InverseDemand, opts: &EquilibriumOptions) -> f64 {
    opts.tol.unwrap_or_else(|| default_tolerance(rl, demand.max_price()))
}

/// Iterates `Ψ` from `(p̄, q̄, 0)` and certifies the limit by sampled deviations.
pub fn solve_equilibrium(
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumSolution> {
    let start = ClearingState::top(rl, demand.max_price(), system.m());
    solve_equilibrium_from(start, system, rl, demand, opts)
}

pub fn solve_equilibrium_from(
    start: ClearingState,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumSolution> {
    check_inputs(&start, system, demand)?;
    if opts.validate_demand {
        let report = validate(demand, system.illiquid(), &ValidationOptions::default());
        if !report.hard_checks_pass() {
            return Err(Error::invalid(
                "inverse_demand",
                format!(
                    "{} monotonicity violations, positive at total supply: {}",
                    report.monotonicity_violations, report.positive_at_supply
                ),
            ));
        }
    }
    let first = iterate(start.clone(), 1.0, opts.max_iter, system, rl, demand, opts);
    let mut sol = if first.status == SolveStatus::Oscillating && opts.retry_damped {
        let budget = opts.max_iter.saturating_sub(first.iterations);
        let mut damped = iterate(start, opts.damping, budget, system, rl, demand, opts);
        damped.iterations += first.iterations;
        damped
    } else {
        first
    };
    sol.nash_gap = nash_gap(&sol.state, system, rl, demand, opts);
    sol.nash_certified = sol.nash_gap <= opts.nash_tol;
    Ok(sol)
}

fn iterate(
    mut state: ClearingState,
    relaxation: f64,
    budget: usize,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> EquilibriumSolution {
    let tol = equilibrium_tolerance(rl, demand, opts);
    let qbar = demand.max_price();
    let mut history: VecDeque<ClearingState> = VecDeque::new();
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(state.clone());
    }
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < budget {
        let mapped = psi(&state, system, rl, demand, opts, iterations as u64);
        residual = distance(&mapped, &state, qbar);
        iterations += 1;
        if residual <= tol {
            status = SolveStatus::Converged;
            break;
        }
        let next = if relaxation == 1.0 {
            mapped
        } else {
            blend(&state, &mapped, relaxation)
        };
        let cycled = history.iter().any(|old| distance(old, &next, qbar) <= tol);
        history.push_back(state);
        if history.len() > opts.history {
            history.pop_front();
        }
        state = next;
        if opts.record_trace {
            trace.push(state.clone());
        }
        if cycled {
            status = SolveStatus::Oscillating;
            residual = distance(&psi(&state, system, rl, demand, opts, iterations as u64), &state, qbar);
            break;
        }
    }
    EquilibriumSolution {
        state,
        residual,
        iterations,
        status,
        relaxation,
        nash_gap: 0.0,
        nash_certified: false,
        trace,
    }
}

/// Largest relative gain `(f(dev) - f(γ_i)) / |f(γ_i)|` over sampled feasible deviations.
pub fn nash_gap(
    state: &ClearingState,
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> f64 {
    let sold = aggregate_sales(system, &state.liquidations);
    (1..=system.n())
        .into_par_iter()
        .map(|firm| firm_gap(firm, state, &sold, system, rl, demand, opts))
        .reduce(|| 0.0, f64::max)
}

fn firm_gap(
    firm: usize,
    state: &ClearingState,
    sold: &[f64],
    system: &FinancialSystem,
    rl: &RelativeLiabilities,
    demand: &InverseDemand,
    opts: &EquilibriumOptions,
) -> f64 {
    let holdings = system.holdings(firm);
    let required = system
        .position(firm, &state.payments, &state.prices, rl)
        .liquidation_requirement();
    let value: f64 = holdings.iter().zip(&state.prices).map(|(s, q)| s * q).sum();
    let target = required.min(value);
    let others = others_sales(system, &state.liquidations, sold, firm);
    let val = Valuation {
        demand,
        holdings,
        others: &others,
    };
    let own: Vec<f64> = holdings
        .iter()
        .zip(state.liquidations.row(firm - 1))
        .map(|(s, g)| s.min(*g))
        .collect();
    let base = val.eval(&own);
    let scale = base.abs().max(f64::MIN_POSITIVE);
    let poly = Polytope::new(holdings, &state.prices, target);
    if poly.active.is_empty() {
        return 0.0;
    }
    let mut rng = seed::rng(opts.seed, &[2, firm as u64]);
    let mut current = poly.project(&own);
    let mut gap: f64 = 0.0;
    for _ in 0..opts.deviations {
        for _ in 0..3 {
            let d = poly.random_direction(&mut rng);
            let (lo, hi) = poly.chord(&current, &d);
            if hi > lo {
                let t = lo + (hi - lo) * rng.random::<f64>();
                current = step(&poly, &current, &d, t);
            }
        }
        gap = gap.max((val.eval(&current) - base) / scale);
    }
    gap
}
