mod common;

use firesale::calibration::{sample_adjacency, sample_portfolio, sample_portfolios};
use firesale::liquidation::verify_minimal_liquidation;
use firesale::scenario::risk_metrics;
use firesale::{
    ClearingProblem, FinancialSystem, InverseDemand, LiquidationStrategy, Matrix, RelativeLiabilities, Requirement,
    SolverOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_system;

fn instance(seed: u64, n: usize, m: usize) -> (FinancialSystem, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = random_system(&mut rng, n, m);
    (sys, rng)
}

fn random_state(rng: &mut ChaCha8Rng, rl: &RelativeLiabilities, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p: Vec<f64> = rl.total.iter().map(|t| t * rng.random_range(0.0..=1.0)).collect();
    p[0] = 0.0;
    let q = (0..m).map(|_| rng.random_range(0.05..=1.0)).collect();
    (p, q)
}

fn lambda(sys: &FinancialSystem, rl: &RelativeLiabilities, p: &[f64], q: &[f64]) -> Vec<f64> {
    (1..=sys.n())
        .map(|i| sys.position(i, p, q, rl).liquidation_requirement())
        .collect()
}

fn sold(sys: &FinancialSystem, gamma: &Matrix) -> Vec<f64> {
    (1..=sys.n())
        .flat_map(|i| {
            sys.holdings(i)
                .iter()
                .zip(gamma.row(i - 1))
                .map(|(s, g)| s.min(*g))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn demand_for(sys: &FinancialSystem) -> InverseDemand {
    if sys.m() == 1 {
        InverseDemand::benchmark_single_asset()
    } else {
        InverseDemand::benchmark_power(sys.total_supply()).unwrap()
    }
}

fn monotone_strategy(m: usize) -> LiquidationStrategy {
    if m == 1 {
        LiquidationStrategy::SingleAsset
    } else {
        LiquidationStrategy::Proportional
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn requirement_is_nonincreasing_in_others_payments_and_prices(
        seed in any::<u64>(), n in 1usize..6, m in 1usize..4, bump in 0.01f64..1.0,
    ) {
        let (sys, mut rng) = instance(seed, n, m);
        let rl = sys.relative_liabilities();
        let (p, q) = random_state(&mut rng, &rl, m);
        let base = lambda(&sys, &rl, &p, &q);
        for i in 1..=n {
            let pos = sys.position(i, &p, &q, &rl);
            prop_assert!(pos.cash_payment() >= 0.0 && pos.cash_payment() <= rl.total[i]);
            prop_assert!(base[i - 1] >= 0.0);
        }
        for j in 1..=n {
            let mut p2 = p.clone();
            p2[j] += bump * (rl.total[j] - p[j]);
            let moved = lambda(&sys, &rl, &p2, &q);
            for i in (1..=n).filter(|&i| i != j) {
                prop_assert!(moved[i - 1] <= base[i - 1] + 1e-12);
            }
        }
        for k in 0..m {
            let mut q2 = q.clone();
            q2[k] += bump * (1.0 - q[k]);
            let moved = lambda(&sys, &rl, &p, &q2);
            for i in 0..n {
                prop_assert!(moved[i] <= base[i] + 1e-12);
            }
        }
    }

    #[test]
    fn relative_liabilities_multiply_back(seed in any::<u64>(), n in 1usize..8) {
        let (sys, _) = instance(seed, n, 1);
        let rl = sys.relative_liabilities();
        let l = sys.liabilities();
        for i in 0..=n {
            let row_sum: f64 = rl.relative.row(i).iter().sum();
            prop_assert!((row_sum - 1.0).abs() <= 1e-12);
            for j in 0..=n {
                if rl.total[i] > 0.0 {
                    prop_assert!((rl.total[i] * rl.relative[(i, j)] - l[(i, j)]).abs() <= 1e-12 * rl.total[i]);
                } else {
                    prop_assert_eq!(rl.relative[(i, j)], 1.0 / (n + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn zero_cap_reduces_to_the_fire_sale_shortfall(seed in any::<u64>(), n in 1usize..6, m in 1usize..4) {
        let (sys, mut rng) = instance(seed, n, m);
        let sys = sys.with_uniform_leverage_cap(0.0).unwrap();
        let rl = sys.relative_liabilities();
        let (p, q) = random_state(&mut rng, &rl, m);
        for i in 1..=n {
            let pos = sys.position(i, &p, &q, &rl);
            prop_assert_eq!(pos.liquidation_requirement(), pos.shortfall());
        }
        let strategy = monotone_strategy(m);
        let lev = strategy.liquidate_with(Requirement::Leverage, &p, &q, &rl, &sys).unwrap();
        let fire = strategy.liquidate_with(Requirement::FireSale, &p, &q, &rl, &sys).unwrap();
        prop_assert_eq!(lev, fire);
    }

    #[test]
    fn exact_strategies_liquidate_minimally(seed in any::<u64>(), n in 1usize..6, m in 1usize..4) {
        let (sys, mut rng) = instance(seed, n, m);
        let rl = sys.relative_liabilities();
        let (p, q) = random_state(&mut rng, &rl, m);
        let gamma = monotone_strategy(m).liquidate(&p, &q, &rl, &sys).unwrap();
        prop_assert!(gamma.as_slice().iter().all(|g| *g >= 0.0));
        prop_assert!(verify_minimal_liquidation(&gamma, &p, &q, &rl, &sys, 1e-9).iter().all(|ok| *ok));
        if m == 1 {
            let need = lambda(&sys, &rl, &p, &q);
            for i in 1..=n {
                let value = q[0] * sys.holdings(i)[0];
                let proceeds = q[0] * gamma[(i - 1, 0)].min(sys.holdings(i)[0]);
                prop_assert!((proceeds - need[i - 1].min(value)).abs() <= 1e-12 * (1.0 + value));
            }
        }
    }

    #[test]
    fn exact_strategies_are_nonincreasing_in_the_state(
        seed in any::<u64>(), n in 1usize..6, m in 1usize..4, bump in 0.01f64..1.0,
    ) {
        let (sys, mut rng) = instance(seed, n, m);
        let rl = sys.relative_liabilities();
        let (p, q) = random_state(&mut rng, &rl, m);
        let strategy = monotone_strategy(m);
        let base = strategy.liquidate(&p, &q, &rl, &sys).unwrap();
        let p2: Vec<f64> = p.iter().zip(&rl.total).map(|(a, t)| a + bump * (t - a)).collect();
        let q2: Vec<f64> = q.iter().map(|a| a + bump * (1.0 - a)).collect();
        for (pp, qq) in [(&p2, &q), (&p, &q2), (&p2, &q2)] {
            let moved = strategy.liquidate(pp, qq, &rl, &sys).unwrap();
            for (a, b) in moved.as_slice().iter().zip(base.as_slice()) {
                prop_assert!(*a <= b + 1e-9 * (1.0 + b));
            }
        }
    }

    #[test]
    fn single_asset_best_first_matches_single_asset(seed in any::<u64>(), n in 1usize..6, eps in 1e-4f64..1.0) {
        let (sys, mut rng) = instance(seed, n, 1);
        let rl = sys.relative_liabilities();
        let (p, q) = random_state(&mut rng, &rl, 1);
        let exact = LiquidationStrategy::SingleAsset.liquidate(&p, &q, &rl, &sys).unwrap();
        for smoothed in [LiquidationStrategy::best_first(eps), LiquidationStrategy::worst_first(eps)] {
            let g = smoothed.liquidate(&p, &q, &rl, &sys).unwrap();
            for (a, b) in sold(&sys, &g).iter().zip(&sold(&sys, &exact)) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b));
            }
        }
    }

    #[test]
    fn picard_iterates_descend_and_converge(seed in any::<u64>(), n in 1usize..6, m in 1usize..4) {
        let (sys, _) = instance(seed, n, m);
        let rl = sys.relative_liabilities();
        let f = demand_for(&sys);
        let prob = ClearingProblem::new(&sys, &rl, &f, monotone_strategy(m)).unwrap();
        let opts = SolverOptions { record_trace: true, ..Default::default() };
        let sol = prob.solve(&opts).unwrap();
        prop_assert!(sol.converged());
        let tol = prob.tolerance(&opts);
        prop_assert!(sol.residual <= tol);
        prop_assert!(prob.residual(&sol.state).unwrap() <= tol);
        sol.state.check_bounds(&rl, f.max_price(), 1e-12).unwrap();
        let s = &sol.state;
        prop_assert!(verify_minimal_liquidation(&s.liquidations, &s.payments, &s.prices, &rl, &sys, 1e-9)
            .iter()
            .all(|ok| *ok));
        for w in sol.trace.windows(2) {
            for (a, b) in w[1].payments.iter().zip(&w[0].payments) {
                prop_assert!(*a <= b + 1e-12);
            }
            for (a, b) in w[1].prices.iter().zip(&w[0].prices) {
                prop_assert!(*a <= b + 1e-12);
            }
        }
    }

    #[test]
    fn least_fixed_point_sits_below_the_greatest(seed in any::<u64>(), n in 1usize..6, m in 1usize..4) {
        let (sys, _) = instance(seed, n, m);
        let rl = sys.relative_liabilities();
        let f = demand_for(&sys);
        let prob = ClearingProblem::new(&sys, &rl, &f, monotone_strategy(m)).unwrap();
        let opts = SolverOptions::default();
        let (lo, hi) = (prob.solve_least(&opts).unwrap(), prob.solve(&opts).unwrap());
        prop_assert!(lo.converged() && hi.converged());
        let tol = 2.0 * prob.tolerance(&opts);
        for (a, b) in lo.state.payments.iter().zip(&hi.state.payments) {
            prop_assert!(*a <= b + tol);
        }
        for (a, b) in lo.state.prices.iter().zip(&hi.state.prices) {
            prop_assert!(*a <= b + tol);
        }
    }

    #[test]
    fn more_cash_never_lowers_clearing_payments(
        seed in any::<u64>(), n in 1usize..6, m in 1usize..4, firm in 0usize..6, extra in 0.01f64..5.0,
    ) {
        let (sys, _) = instance(seed, n, m);
        let mut liquid = sys.liquid().to_vec();
        liquid[firm % n] += extra;
        let richer = FinancialSystem::new(
            sys.liabilities().clone(),
            liquid,
            sys.illiquid().clone(),
            sys.leverage_cap().to_vec(),
        )
        .unwrap();
        let f = demand_for(&sys);
        let solve = |s: &FinancialSystem| {
            let rl = s.relative_liabilities();
            ClearingProblem::new(s, &rl, &f, monotone_strategy(m)).unwrap().solve(&SolverOptions::default()).unwrap()
        };
        let (a, b) = (solve(&sys), solve(&richer));
        for (pa, pb) in a.state.payments.iter().zip(&b.state.payments) {
            prop_assert!(*pb >= pa - 1e-7);
        }
    }

    #[test]
    fn risk_metrics_are_fractions(seed in any::<u64>(), n in 1usize..6, m in 1usize..4) {
        let (sys, _) = instance(seed, n, m);
        let rl = sys.relative_liabilities();
        let f = demand_for(&sys);
        let sol = ClearingProblem::new(&sys, &rl, &f, monotone_strategy(m))
            .unwrap()
            .solve(&SolverOptions::default())
            .unwrap();
        let r = risk_metrics(&sol.state, sol.status, &sys, &rl, 1e-6 * (1.0 + rl.max_obligation()));
        for v in [r.frac_defaulting, r.frac_leverage_violating, r.outside_payment_fraction] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn inverse_demand_is_monotone_and_bounded(
        z in prop::collection::vec(0.0f64..1e9, 3), dz in prop::collection::vec(0.0f64..1e9, 3),
        knots in prop::collection::vec((0.01f64..100.0, 0.0f64..0.5), 1..6),
    ) {
        let mut units = 0.0;
        let mut price = 1.0;
        let mut table = vec![(0.0, 1.0)];
        for (du, drop) in &knots {
            units += du;
            price *= 1.0 - drop;
            table.push((units, price));
        }
        let families = [
            InverseDemand::benchmark_single_asset(),
            InverseDemand::benchmark_power(vec![1e8; 3]).unwrap(),
            InverseDemand::tabulated(vec![table.clone(), table.clone(), table]).unwrap(),
        ];
        for f in &families {
            let m = f.m();
            let z1 = &z[..m];
            let z2: Vec<f64> = z1.iter().zip(&dz).map(|(a, b)| a + b).collect();
            let (lo, hi) = (f.evaluate(z1).unwrap(), f.evaluate(&z2).unwrap());
            for k in 0..m {
                prop_assert!(hi[k] <= lo[k] + 1e-12);
                prop_assert!(hi[k] >= 0.0 && lo[k] <= f.max_price()[k]);
            }
        }
        prop_assert_eq!(families[0].evaluate(&[0.0]).unwrap(), vec![1.0]);
        prop_assert_eq!(families[1].evaluate(&[0.0; 3]).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn portfolio_sampling_conserves_capital(
        seed in any::<u64>(), capital in 0.0f64..1e3, alpha in 0.0f64..=1.0, sigma in 0.0f64..3.0, m in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qbar: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
        let (x, s) = sample_portfolio(capital, alpha, sigma, &qbar, &mut rng).unwrap();
        let value: f64 = s.iter().zip(&qbar).map(|(a, b)| a * b).sum();
        prop_assert!(s.iter().all(|v| *v >= 0.0) && x >= 0.0);
        prop_assert!((x + value - capital).abs() <= 1e-9);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), n in 1usize..30, prob in 0.0f64..=1.0) {
        let a = sample_adjacency(n, prob, seed).unwrap();
        prop_assert_eq!(&a, &sample_adjacency(n, prob, seed).unwrap());
        for i in 0..n {
            prop_assert!(!a.has(i, i));
        }
        let capital: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let one = sample_portfolios(&capital, 0.3, 0.5, &[1.0, 0.5], seed).unwrap();
        prop_assert_eq!(one, sample_portfolios(&capital, 0.3, 0.5, &[1.0, 0.5], seed).unwrap());
    }
}

#[test]
fn mean_out_degree_matches_the_link_probability() {
    let (n, prob, seeds) = (50usize, 0.25, 1000u64);
    let mut total = 0usize;
    for seed in 0..seeds {
        let a = sample_adjacency(n, prob, seed).unwrap();
        total += (0..n).map(|i| a.out_degree(i)).sum::<usize>();
    }
    let draws = (n as u64 * seeds) as f64;
    let mean = total as f64 / draws;
    let expected = (n - 1) as f64 * prob;
    let se = ((n - 1) as f64 * prob * (1.0 - prob) / draws).sqrt();
    assert!(
        (mean - expected).abs() <= 3.0 * se,
        "mean {mean}, expected {expected} ± {}",
        3.0 * se
    );
}
