//! Dense two-phase simplex with Bland's rule.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LessEq,
    Equal,
    GreaterEq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coefficients: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min c^T x` subject to the constraints and `x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

const EPS: f64 = 1e-11;

struct Tableau {
    /// Constraint rows followed by the objective row; the last column is the right-hand side.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
    pivots: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.rows[r][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    /// Minimises the objective row over columns `< allowed`.
    fn optimise(&mut self, allowed: usize, max_pivots: usize) -> Result<()> {
        let m = self.basis.len();
        loop {
            let obj = &self.rows[m];
            let Some(enter) = (0..allowed).find(|&c| obj[c] < -EPS) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..m {
                let a = self.rows[r][enter];
                if a > EPS {
                    let ratio = self.rhs(r) / a;
                    let better = match leave {
                        None => true,
                        Some((lr, best)) => {
                            ratio < best - EPS || (ratio <= best + EPS && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Solver("linear program is unbounded".into()));
            };
            self.pivot(r, enter);
            if self.pivots > max_pivots {
                return Err(Error::Solver("simplex pivot limit reached".into()));
            }
        }
    }
}

impl LinearProgram {
    pub fn solve(&self) -> Result<LpSolution> {
        let nvar = self.objective.len();
        if self.constraints.iter().any(|c| c.coefficients.len() != nvar) {
            return Err(Error::Dimension("constraint width differs from objective".into()));
        }
        let m = self.constraints.len();
        let slack_count = self
            .constraints
            .iter()
            .filter(|c| c.relation != Relation::Equal)
            .count();
        let art_start = nvar + slack_count;
        let cols = art_start + m;
        let mut rows = Vec::with_capacity(m + 1);
        let mut basis = Vec::with_capacity(m);
        let mut slack = nvar;
        for (r, c) in self.constraints.iter().enumerate() {
            let flip = c.rhs < 0.0;
            let sign = if flip { -1.0 } else { 1.0 };
            let relation = match (c.relation, flip) {
                (Relation::LessEq, true) => Relation::GreaterEq,
                (Relation::GreaterEq, true) => Relation::LessEq,
                (rel, _) => rel,
            };
            let mut row = vec![0.0; cols + 1];
            for (v, a) in row.iter_mut().zip(&c.coefficients) {
                *v = sign * a;
            }
            row[cols] = sign * c.rhs;
            match relation {
                Relation::LessEq => {
                    row[slack] = 1.0;
                    basis.push(slack);
                    slack += 1;
                }
                Relation::GreaterEq => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[art_start + r] = 1.0;
                    basis.push(art_start + r);
                }
                Relation::Equal => {
                    row[art_start + r] = 1.0;
                    basis.push(art_start + r);
                }
            }
            rows.push(row);
        }
        let mut phase1 = vec![0.0; cols + 1];
        for (r, &b) in basis.iter().enumerate() {
            if b >= art_start {
                for (v, a) in phase1.iter_mut().zip(&rows[r]) {
                    *v -= a;
                }
                phase1[b] = 0.0;
            }
        }
        rows.push(phase1);
        let mut t = Tableau {
            rows,
            basis,
            cols,
            pivots: 0,
        };
        let max_pivots = 50 * (cols + m).max(100);
        t.optimise(cols, max_pivots)?;
        let scale = 1.0 + self.constraints.iter().map(|c| c.rhs.abs()).fold(0.0, f64::max);
        if -t.rows[m][cols] > 1e-9 * scale {
            return Err(Error::Solver("linear program is infeasible".into()));
        }
        for r in 0..m {
            if t.basis[r] >= art_start {
                if let Some(c) = (0..art_start).find(|&c| t.rows[r][c].abs() > EPS) {
                    t.pivot(r, c);
                }
            }
        }
        let mut phase2 = vec![0.0; cols + 1];
        phase2[..nvar].copy_from_slice(&self.objective);
        for r in 0..m {
            let b = t.basis[r];
            let cb = phase2[b];
            if cb != 0.0 {
                for (v, a) in phase2.iter_mut().zip(&t.rows[r]) {
                    *v -= cb * a;
                }
            }
        }
        t.rows[m] = phase2;
        t.optimise(art_start, max_pivots)?;
        let mut x = vec![0.0; nvar];
        for (r, &b) in t.basis.iter().enumerate() {
            if b < nvar {
                x[b] = t.rhs(r).max(0.0);
            }
        }
        let objective = x.iter().zip(&self.objective).map(|(a, c)| a * c).sum();
        Ok(LpSolution {
            x,
            objective,
            pivots: t.pivots,
        })
    }
}
