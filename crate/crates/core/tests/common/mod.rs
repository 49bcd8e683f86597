#![allow(dead_code)]

use firesale::calibration::Adjacency;
use firesale::{FinancialSystem, InverseDemand, Matrix};
use rand::Rng;

/// Two firms, one asset: firm 1 owes 5 to firm 2 and 5 outside, firm 2 owes 8 outside.
pub fn t1() -> (FinancialSystem, InverseDemand) {
    let l = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![5.0, 0.0, 5.0], vec![8.0, 0.0, 0.0]]).unwrap();
    let sys = FinancialSystem::new(
        l,
        vec![1.0, 1.0],
        Matrix::from_rows(&[vec![6.0], vec![10.0]]).unwrap(),
        vec![2.0, 2.0],
    )
    .unwrap();
    (sys, linear_demand(1.0, 32.0))
}

/// `F(z) = qbar * (1 - z / z0)^+`.
pub fn linear_demand(qbar: f64, z0: f64) -> InverseDemand {
    InverseDemand::tabulated(vec![vec![(0.0, qbar), (z0, 0.0)]]).unwrap()
}

/// Plain-data copy of a two-firm, one-asset instance for the grid oracle.
#[derive(Debug, Clone, Copy)]
pub struct TwoFirm {
    /// `l[i][j]` for nodes 0..=2.
    pub l: [[f64; 3]; 3],
    pub x: [f64; 2],
    pub s: [f64; 2],
    pub cap: [f64; 2],
    pub qbar: f64,
    pub z0: f64,
}

impl TwoFirm {
    pub fn t1() -> Self {
        Self {
            l: [[0.0; 3], [5.0, 0.0, 5.0], [8.0, 0.0, 0.0]],
            x: [1.0, 1.0],
            s: [6.0, 10.0],
            cap: [2.0, 2.0],
            qbar: 1.0,
            z0: 32.0,
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut l = [[0.0; 3]; 3];
        l[1][0] = rng.random_range(1.0..10.0);
        l[2][0] = rng.random_range(1.0..10.0);
        if rng.random_bool(0.8) {
            l[1][2] = rng.random_range(0.0..8.0);
        }
        if rng.random_bool(0.8) {
            l[2][1] = rng.random_range(0.0..8.0);
        }
        Self {
            l,
            x: [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)],
            s: [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)],
            cap: [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)],
            qbar: rng.random_range(0.5..2.0),
            z0: rng.random_range(5.0..40.0),
        }
    }

    pub fn system(&self) -> (FinancialSystem, InverseDemand) {
        let rows: Vec<Vec<f64>> = self.l.iter().map(|r| r.to_vec()).collect();
        let sys = FinancialSystem::new(
            Matrix::from_rows(&rows).unwrap(),
            self.x.to_vec(),
            Matrix::from_rows(&[vec![self.s[0]], vec![self.s[1]]]).unwrap(),
            self.cap.to_vec(),
        )
        .unwrap();
        (sys, linear_demand(self.qbar, self.z0))
    }

    fn pbar(&self, i: usize) -> f64 {
        self.l[i + 1].iter().sum()
    }

    /// Share of firm `j`'s payment received by firm `i`.
    fn share(&self, j: usize, i: usize) -> f64 {
        self.l[j + 1][i + 1] / self.pbar(j)
    }

    fn demand(&self, z: f64) -> f64 {
        self.qbar * (1.0 - z / self.z0).max(0.0)
    }

    /// Payments when exactly the firms in `defaulting` pay out their wealth at price `q`.
    fn payments(&self, defaulting: [bool; 2], q: f64) -> [f64; 2] {
        let pbar = [self.pbar(0), self.pbar(1)];
        let own = [self.x[0] + self.s[0] * q, self.x[1] + self.s[1] * q];
        match defaulting {
            [false, false] => pbar,
            [true, false] => [own[0] + self.share(1, 0) * pbar[1], pbar[1]],
            [false, true] => [pbar[0], own[1] + self.share(0, 1) * pbar[0]],
            [true, true] => {
                let (a, b) = (self.share(1, 0), self.share(0, 1));
                let det = 1.0 - a * b;
                [(own[0] + a * own[1]) / det, (own[1] + b * own[0]) / det]
            }
        }
    }

    fn consistent(&self, defaulting: [bool; 2], p: [f64; 2], q: f64) -> bool {
        let eps = 1e-9;
        (0..2).all(|i| {
            let inc = self.share(1 - i, i) * p[1 - i];
            let wealth = self.x[i] + self.s[i] * q + inc;
            if defaulting[i] {
                p[i] >= -eps && p[i] <= self.pbar(i) + eps
            } else {
                wealth >= self.pbar(i) - eps
            }
        })
    }

    /// Units sold by firm `i` under the single-asset rule.
    fn sold(&self, i: usize, p: [f64; 2], q: f64) -> f64 {
        let inc = self.share(1 - i, i) * p[1 - i];
        let pbar = self.pbar(i);
        let shortfall = (pbar - self.x[i] - inc).max(0.0);
        let equity = (self.x[i] + self.s[i] * q + inc - pbar).max(0.0);
        let need = (shortfall - self.cap[i] * equity).max(0.0);
        if need == 0.0 {
            0.0
        } else if q > 0.0 {
            self.s[i].min(need / q)
        } else {
            self.s[i]
        }
    }

    fn gap(&self, defaulting: [bool; 2], q: f64) -> f64 {
        let p = self.payments(defaulting, q);
        self.demand(self.sold(0, p, q) + self.sold(1, p, q)) - q
    }

    /// Fixed points `(p_1, p_2, q)` found by scanning `q` on a `1e-3 * qbar` grid for each
    /// default pattern and bisecting sign changes of `F(sales) - q`.
    pub fn grid_fixed_points(&self) -> Vec<[f64; 3]> {
        let cells = 1000;
        let mut found: Vec<[f64; 3]> = Vec::new();
        let mut push = |pt: [f64; 3]| {
            if !found.iter().any(|f| (0..3).all(|k| (f[k] - pt[k]).abs() <= 1e-8)) {
                found.push(pt);
            }
        };
        for pattern in [[false, false], [true, false], [false, true], [true, true]] {
            let h = |q: f64| self.gap(pattern, q);
            let accept = |q: f64| {
                let p = self.payments(pattern, q);
                self.consistent(pattern, p, q) && h(q).abs() <= 1e-9
            };
            for c in 0..cells {
                let (mut a, mut b) = (
                    self.qbar * c as f64 / cells as f64,
                    self.qbar * (c + 1) as f64 / cells as f64,
                );
                let (mut ha, hb) = (h(a), h(b));
                let mut roots = Vec::new();
                if ha == 0.0 {
                    roots.push(a);
                }
                if c + 1 == cells && hb.abs() <= 1e-12 {
                    roots.push(b);
                }
                if ha * hb < 0.0 {
                    for _ in 0..200 {
                        let mid = 0.5 * (a + b);
                        if mid <= a || mid >= b {
                            break;
                        }
                        let hm = h(mid);
                        if hm == 0.0 {
                            a = mid;
                            b = mid;
                            break;
                        }
                        if (ha < 0.0) == (hm < 0.0) {
                            a = mid;
                            ha = hm;
                        } else {
                            b = mid;
                        }
                    }
                    roots.push(if h(a).abs() <= h(b).abs() { a } else { b });
                }
                for q in roots {
                    if accept(q) {
                        let p = self.payments(pattern, q);
                        push([p[0].clamp(0.0, self.pbar(0)), p[1].clamp(0.0, self.pbar(1)), q]);
                    }
                }
            }
        }
        found
    }
}

/// Greedy liquidation raising `need` by selling assets in `order` until the proceeds suffice.
pub fn greedy(holdings: &[f64], prices: &[f64], need: f64, order: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; holdings.len()];
    let mut left = need;
    for &k in order {
        if left <= 0.0 {
            break;
        }
        let value = holdings[k] * prices[k];
        if value <= left {
            g[k] = holdings[k];
            left -= value;
        } else {
            g[k] = left / prices[k];
            left = 0.0;
        }
    }
    g
}

/// Assets by descending (`best = true`) or ascending price.
pub fn price_order(prices: &[f64], best: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..prices.len()).collect();
    order.sort_by(|&a, &b| {
        let c = prices[b].partial_cmp(&prices[a]).unwrap();
        if best {
            c
        } else {
            c.reverse()
        }
    });
    order
}

/// Smallest outside obligation over all basic feasible solutions of the liability LP
/// with every link allowed.
pub fn enumerate_liability_lp(obligations: &[f64], caps: &[f64]) -> f64 {
    let n = obligations.len();
    let mut cols: Vec<(Option<(usize, usize)>, bool)> = Vec::new();
    for i in 0..n {
        cols.push((Some((i, usize::MAX)), true));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cols.push((Some((i, j)), false));
            }
        }
    }
    let structural = cols.len();
    for _ in 0..n {
        cols.push((None, false));
    }
    let rows = 2 * n;
    let column = |c: usize| -> Vec<f64> {
        let mut v = vec![0.0; rows];
        if c >= structural {
            v[n + (c - structural)] = 1.0;
        } else {
            let (i, j) = cols[c].0.unwrap();
            v[i] = 1.0;
            if j != usize::MAX {
                v[n + j] = 1.0;
            }
        }
        v
    };
    let rhs: Vec<f64> = obligations.iter().chain(caps).copied().collect();
    let mut best = f64::INFINITY;
    for basis in combinations(cols.len(), rows) {
        let mut a: Vec<Vec<f64>> = (0..rows)
            .map(|r| basis.iter().map(|&c| column(c)[r]).chain([rhs[r]]).collect())
            .collect();
        let Some(x) = gauss(&mut a) else { continue };
        if x.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let objective: f64 = basis
            .iter()
            .zip(&x)
            .filter(|(c, _)| **c < structural && cols[**c].1)
            .map(|(_, v)| *v)
            .sum();
        best = best.min(objective);
    }
    best
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for c in start..n {
            cur.push(c);
            rec(c + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Solves the square system stored as an augmented matrix; `None` when singular.
fn gauss(a: &mut [Vec<f64>]) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r][col..].iter_mut().zip(&pivot_row[col..]) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    Some((0..n).map(|r| a[r][n] / a[r][r]).collect())
}

pub fn complete(n: usize) -> Adjacency {
    Adjacency::complete(n)
}

/// Random system with `n` firms and `m` assets at unit scale.
pub fn random_system<R: Rng>(rng: &mut R, n: usize, m: usize) -> FinancialSystem {
    let mut l = Matrix::zeros(n + 1, n + 1);
    for i in 1..=n {
        l.row_mut(i)[0] = rng.random_range(0.5..6.0);
        for j in 1..=n {
            if i != j && rng.random_bool(0.5) {
                l.row_mut(i)[j] = rng.random_range(0.0..5.0);
            }
        }
    }
    let x = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
    let s = Matrix::from_vec(n, m, (0..n * m).map(|_| rng.random_range(0.0..6.0)).collect()).unwrap();
    let cap = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
    FinancialSystem::new(l, x, s, cap).unwrap()
}
