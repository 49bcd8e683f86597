mod common;

use firesale::calibration::{calibrate_liabilities, sample_adjacency};
use firesale::demand::DemandSpec;
use firesale::liquidation::verify_minimal_liquidation;
use firesale::scenario::{min_safe_leverage_for, risk_metrics, run, LeverageSearch, ScenarioConfig, StrategyChoice};
use firesale::{ClearingProblem, LiquidationStrategy, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{enumerate_liability_lp, greedy, price_order, TwoFirm};

fn oracle_instances() -> Vec<TwoFirm> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut v = vec![TwoFirm::t1()];
    v.extend((0..20).map(|_| TwoFirm::random(&mut rng)));
    v
}

#[test]
fn t1_greatest_fixed_point_matches_the_oracle() {
    let inst = TwoFirm::t1();
    let (sys, f) = inst.system();
    let rl = sys.relative_liabilities();
    let prob = ClearingProblem::new(&sys, &rl, &f, LiquidationStrategy::SingleAsset).unwrap();
    let sol = prob.solve(&SolverOptions::default()).unwrap();
    let points = inst.grid_fixed_points();
    assert!(!points.is_empty());
    let top = points
        .iter()
        .copied()
        .max_by(|a, b| a[2].partial_cmp(&b[2]).unwrap())
        .unwrap();
    assert!((sol.state.payments[1] - top[0]).abs() <= 1e-4);
    assert!((sol.state.payments[2] - top[1]).abs() <= 1e-4);
    assert!((sol.state.prices[0] - top[2]).abs() <= 1e-4);

    // Metrics classify the oracle point the same way.
    let tol = 1e-6 * (1.0 + rl.max_obligation());
    let m = risk_metrics(&sol.state, sol.status, &sys, &rl, tol);
    let defaults = (0..2).filter(|&i| top[i] < rl.total[i + 1] - tol).count();
    assert_eq!(m.frac_defaulting, defaults as f64 / 2.0);
}

#[test]
fn least_fixed_point_is_below_every_oracle_point() {
    for inst in oracle_instances() {
        let (sys, f) = inst.system();
        let rl = sys.relative_liabilities();
        let prob = ClearingProblem::new(&sys, &rl, &f, LiquidationStrategy::SingleAsset).unwrap();
        let least = prob.solve_least(&SolverOptions::default()).unwrap();
        let greatest = prob.solve(&SolverOptions::default()).unwrap();
        assert!(least.converged());
        let low = [least.state.payments[1], least.state.payments[2], least.state.prices[0]];
        let high = [
            greatest.state.payments[1],
            greatest.state.payments[2],
            greatest.state.prices[0],
        ];
        let points = inst.grid_fixed_points();
        for pt in &points {
            for k in 0..3 {
                assert!(low[k] <= pt[k] + 1e-4, "{inst:?}: least {low:?} above oracle {pt:?}");
                assert!(pt[k] <= high[k] + 1e-4);
            }
        }
        let nearest = points
            .iter()
            .map(|pt| (0..3).map(|k| (pt[k] - low[k]).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        assert!(
            nearest <= 1e-4,
            "{inst:?}: least fixed point {low:?} not found by the oracle"
        );
    }
}

#[test]
fn more_cash_never_lowers_oracle_checked_payments() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for inst in oracle_instances() {
        let mut richer = inst;
        let i = rng.random_range(0..2);
        richer.x[i] += rng.random_range(0.1..3.0);
        let solve = |t: &TwoFirm| {
            let (sys, f) = t.system();
            let rl = sys.relative_liabilities();
            ClearingProblem::new(&sys, &rl, &f, LiquidationStrategy::SingleAsset)
                .unwrap()
                .solve(&SolverOptions::default())
                .unwrap()
        };
        let (a, b) = (solve(&inst), solve(&richer));
        for (pa, pb) in a.state.payments.iter().zip(&b.state.payments) {
            assert!(pb >= &(pa - 1e-7));
        }
        let top = |t: &TwoFirm| {
            t.grid_fixed_points()
                .into_iter()
                .max_by(|a, b| a[2].partial_cmp(&b[2]).unwrap())
                .unwrap()
        };
        let (oa, ob) = (top(&inst), top(&richer));
        assert!(ob[0] >= oa[0] - 1e-4 && ob[1] >= oa[1] - 1e-4);
    }
}

fn exhaustive_threshold(sys: &firesale::FinancialSystem, cfg: &ScenarioConfig, search: &LeverageSearch) -> Option<f64> {
    let stable: Vec<bool> = (0..search.len())
        .into_par_iter()
        .map(|k| {
            let r = run(&sys.with_uniform_leverage_cap(search.point(k)).unwrap(), cfg).unwrap();
            cfg.stability.holds(&r)
        })
        .collect();
    let first = stable.iter().position(|s| *s)?;
    assert!(
        stable[first..].iter().all(|s| *s),
        "stability is not monotone in the cap"
    );
    Some(search.point(first))
}

#[test]
fn t1_threshold_matches_an_exhaustive_scan() {
    let cfg = ScenarioConfig {
        inverse_demand: DemandSpec::Tabulated {
            knots: Some(vec![vec![(0.0, 1.0), (32.0, 0.0)]]),
            csv: None,
        },
        strategy: StrategyChoice::Known(LiquidationStrategy::SingleAsset),
        ..Default::default()
    };
    let search = LeverageSearch::default();
    let (sys, _) = common::t1();
    let found = min_safe_leverage_for(&sys, &cfg, &search).unwrap();
    assert_eq!(found.threshold, exhaustive_threshold(&sys, &cfg, &search));
    assert_eq!(found.threshold, None);
    assert!(found.evaluations.iter().all(|(_, stable, _)| !stable));

    let mut variant = TwoFirm::t1();
    variant.x = [5.0, 2.0];
    let (sys, _) = variant.system();
    let found = min_safe_leverage_for(&sys, &cfg, &search).unwrap();
    let expected = exhaustive_threshold(&sys, &cfg, &search);
    assert!(expected.is_some_and(|t| t > 0.0), "{expected:?}");
    assert_eq!(found.threshold, expected);
    assert!(found.evaluations.len() < 40);
}

#[test]
fn solvent_liquid_system_is_stable_at_the_lower_bound() {
    let (mut sys, _) = common::t1();
    sys = firesale::FinancialSystem::new(
        sys.liabilities().clone(),
        vec![20.0, 20.0],
        sys.illiquid().clone(),
        vec![0.0, 0.0],
    )
    .unwrap();
    let cfg = ScenarioConfig {
        strategy: StrategyChoice::Known(LiquidationStrategy::SingleAsset),
        ..Default::default()
    };
    let found = min_safe_leverage_for(&sys, &cfg, &LeverageSearch::default()).unwrap();
    assert_eq!(found.threshold, Some(0.0));
}

#[test]
fn liability_lp_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..40 {
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..30.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..20.0)).collect();
        let l = calibrate_liabilities(&p, &common::complete(3), &c).unwrap();
        let objective: f64 = (1..=3).map(|i| l[(i, 0)]).sum();
        let oracle = enumerate_liability_lp(&p, &c);
        assert!(
            (objective - oracle).abs() <= 1e-12 * (1.0 + p.iter().sum::<f64>()),
            "{p:?} {c:?}"
        );
    }
}

#[test]
fn liability_lp_feasible_on_sparse_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for seed in 0..20 {
        let n = rng.random_range(2..=15);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let adj = sample_adjacency(n, 0.4, seed).unwrap();
        let l = calibrate_liabilities(&p, &adj, &c).unwrap();
        for i in 0..n {
            assert!((l.row(i + 1).iter().sum::<f64>() - p[i]).abs() <= 1e-9);
            let inflow: f64 = (1..=n).map(|j| l[(j, i + 1)]).sum();
            assert!(inflow <= c[i] + 1e-9);
            for j in 0..n {
                if !adj.has(i, j) {
                    assert_eq!(l[(i + 1, j + 1)], 0.0);
                }
            }
        }
    }
}

#[test]
fn smoothed_strategies_approach_greedy_on_random_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let m = rng.random_range(2..=5);
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..5.0)).collect();
        let mut q: Vec<f64> = (0..m).map(|k| 0.3 + 0.2 * k as f64).collect();
        for k in (1..m).rev() {
            q.swap(k, rng.random_range(0..=k));
        }
        let value: f64 = s.iter().zip(&q).map(|(a, b)| a * b).sum();
        let need = rng.random_range(0.0..1.2) * value;
        let l = firesale::Matrix::from_rows(&[vec![0.0, 0.0], vec![need, 0.0]]).unwrap();
        let sys = firesale::FinancialSystem::new(
            l,
            vec![0.0],
            firesale::Matrix::from_vec(1, m, s.clone()).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let rl = sys.relative_liabilities();
        let pay = vec![0.0, need];
        for best in [true, false] {
            let reference = greedy(&s, &q, need.min(value), &price_order(&q, best));
            let strategy = if best {
                LiquidationStrategy::best_first(1e-3)
            } else {
                LiquidationStrategy::worst_first(1e-3)
            };
            let gamma = strategy.liquidate(&pay, &q, &rl, &sys).unwrap();
            for k in 0..m {
                assert!((gamma[(0, k)].min(s[k]) - reference[k]).abs() <= 1e-9);
            }
            assert!(verify_minimal_liquidation(&gamma, &pay, &q, &rl, &sys, 1e-9)[0]);
        }
    }
}
