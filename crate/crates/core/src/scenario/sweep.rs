use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build, run, BankRecord, ScenarioConfig, ScenarioResult};
use crate::calibration::LeverageCap;
use crate::clearing::SolveStatus;
use crate::error::{Error, Result};
use crate::seed;

const STREAM_SWEEP: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    /// Incoming interbank cap as a fraction of assets.
    Pin,
    Prob,
    Sigma,
    Beta,
    Leverage,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "pin" => Ok(SweepParam::Pin),
            "prob" => Ok(SweepParam::Prob),
            "sigma" => Ok(SweepParam::Sigma),
            "beta" => Ok(SweepParam::Beta),
            "leverage" => Ok(SweepParam::Leverage),
            other => Err(Error::Input(format!(
                "unknown sweep parameter `{other}` (alpha, pin, prob, sigma, beta, leverage)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn apply(self, config: &mut ScenarioConfig, value: f64) {
        match self {
            SweepParam::Alpha => config.calibration.alpha = value,
            SweepParam::Pin => config.calibration.max_interbank_fraction = value,
            SweepParam::Prob => config.calibration.connection_prob = value,
            SweepParam::Sigma => config.calibration.sigma = value,
            SweepParam::Beta => config.beta = value,
            SweepParam::Leverage => config.calibration.leverage_cap = LeverageCap::Uniform(value),
        }
    }
}

/// Parses `a:b:step` into `a, a + step, ...` up to `b` inclusive.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let [a, b, step] = parts.as_slice() else {
        return Err(Error::Input(format!("grid `{text}` is not of the form a:b:step")));
    };
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Input(format!("`{s}` in grid `{text}` is not a number")))
    };
    let (a, b, step) = (num(a)?, num(b)?, num(step)?);
    if !(a.is_finite() && b.is_finite() && b >= a) {
        return Err(Error::Input(format!("grid `{text}` needs finite a <= b")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Input(format!("grid `{text}` needs a positive step")));
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    if count > 10_000_000 {
        return Err(Error::Input(format!("grid `{text}` has too many points")));
    }
    Ok((0..count).map(|k| grid_point(a, step, k)).collect())
}

/// `a + k * step` rounded to a few digits below the step's resolution.
pub(crate) fn grid_point(a: f64, step: f64, k: usize) -> f64 {
    let v = a + k as f64 * step;
    let digits = (3.0 - step.log10().floor()).clamp(0.0, 15.0) as i32;
    let scale = 10f64.powi(digits);
    let r = (v * scale).round() / scale;
    if (r - v).abs() <= step * 1e-6 {
        r
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub rep: usize,
    /// `None` when the solve failed to converge and no interpolation was possible.
    pub result: Option<ScenarioResult>,
    pub status: SolveStatus,
}

impl SweepRow {
    pub fn interpolated(&self) -> bool {
        self.result.is_some_and(|r| r.interpolated)
    }
}

/// Seed of replication `rep` under base seed `base`.
pub fn replication_seed(base: u64, rep: usize) -> u64 {
    seed::derive(base, &[STREAM_SWEEP, rep as u64])
}

/// One scenario per grid point and replication, in grid-major, replication-minor order.
///
/// Replication `r` calibrates with a seed derived from `(base_seed, r)`, so every grid point
/// of a replication shares its network and portfolio draws. Points whose solve did not
/// converge are filled linearly from the nearest converged neighbours of the same replication.
pub fn sweep(
    year_records: &[BankRecord],
    config: &ScenarioConfig,
    param: SweepParam,
    grid: &[f64],
    reps: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || reps == 0 {
        return Err(Error::Input(
            "sweep needs a nonempty grid and at least one replication".into(),
        ));
    }
    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..reps).map(move |r| (g, r))).collect();
    let raw: Vec<ScenarioResult> = tasks
        .par_iter()
        .map(|&(g, r)| {
            let mut cfg = config.clone();
            let s = replication_seed(base_seed, r);
            cfg.calibration.seed = s;
            cfg.equilibrium.seed = s;
            param.apply(&mut cfg, grid[g]);
            let built = build(year_records, &cfg)?;
            run(&built.system, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<SweepRow> = tasks
        .iter()
        .zip(&raw)
        .map(|(&(g, r), res)| SweepRow {
            param: grid[g],
            rep: r,
            result: (res.status == SolveStatus::Converged).then_some(*res),
            status: res.status,
        })
        .collect();
    for r in 0..reps {
        interpolate_rep(&mut rows, r, reps);
    }
    Ok(rows)
}

fn interpolate_rep(rows: &mut [SweepRow], rep: usize, reps: usize) {
    let idx: Vec<usize> = (0..rows.len() / reps).map(|g| g * reps + rep).collect();
    let converged: Vec<usize> = idx.iter().copied().filter(|&i| rows[i].result.is_some()).collect();
    for &i in &idx {
        if rows[i].result.is_some() {
            continue;
        }
        let x = rows[i].param;
        let left = converged.iter().rev().find(|&&j| rows[j].param < x);
        let right = converged.iter().find(|&&j| rows[j].param > x);
        if let (Some(&l), Some(&r)) = (left, right) {
            let (a, b) = (rows[l].result.unwrap(), rows[r].result.unwrap());
            let w = (x - rows[l].param) / (rows[r].param - rows[l].param);
            let lerp = |u: f64, v: f64| u + w * (v - u);
            rows[i].result = Some(ScenarioResult {
                frac_defaulting: lerp(a.frac_defaulting, b.frac_defaulting),
                frac_leverage_violating: lerp(a.frac_leverage_violating, b.frac_leverage_violating),
                outside_payment_fraction: lerp(a.outside_payment_fraction, b.outside_payment_fraction),
                status: rows[i].status,
                interpolated: true,
            });
        }
    }
}

/// `param,rep,frac_default,frac_violate,outside_frac,status,interpolated`.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "param",
        "rep",
        "frac_default",
        "frac_violate",
        "outside_frac",
        "status",
        "interpolated",
    ])?;
    for row in rows {
        let cell = |f: fn(&ScenarioResult) -> f64| row.result.map(|r| f(&r).to_string()).unwrap_or_default();
        wtr.write_record([
            row.param.to_string(),
            row.rep.to_string(),
            cell(|r| r.frac_defaulting),
            cell(|r| r.frac_leverage_violating),
            cell(|r| r.outside_payment_fraction),
            row.status.as_str().to_string(),
            row.interpolated().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub param: f64,
    /// Replications with a value, interpolated ones included.
    pub count: usize,
    pub missing: usize,
    pub frac_default: MetricSummary,
    pub frac_violate: MetricSummary,
    pub outside_frac: MetricSummary,
}

fn summary_of(mut v: Vec<f64>) -> MetricSummary {
    v.sort_by(f64::total_cmp);
    let mean = if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    };
    MetricSummary {
        mean,
        q05: quantile(&v, 0.05),
        q95: quantile(&v, 0.95),
    }
}

/// Mean and 5%/95% quantiles per grid point.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let param = rows[start].param;
        let end = rows[start..]
            .iter()
            .position(|r| r.param != param)
            .map_or(rows.len(), |p| start + p);
        let vals: Vec<ScenarioResult> = rows[start..end].iter().filter_map(|r| r.result).collect();
        out.push(SummaryRow {
            param,
            count: vals.len(),
            missing: end - start - vals.len(),
            frac_default: summary_of(vals.iter().map(|r| r.frac_defaulting).collect()),
            frac_violate: summary_of(vals.iter().map(|r| r.frac_leverage_violating).collect()),
            outside_frac: summary_of(vals.iter().map(|r| r.outside_payment_fraction).collect()),
        });
        start = end;
    }
    out
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["param".to_string(), "count".to_string(), "missing".to_string()];
    for m in ["frac_default", "frac_violate", "outside_frac"] {
        for s in ["mean", "q05", "q95"] {
            header.push(format!("{m}_{s}"));
        }
    }
    wtr.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.param.to_string(), row.count.to_string(), row.missing.to_string()];
        for m in [row.frac_default, row.frac_violate, row.outside_frac] {
            for v in [m.mean, m.q05, m.q95] {
                rec.push(if v.is_nan() { String::new() } else { v.to_string() });
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
