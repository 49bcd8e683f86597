use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{build, run, BankRecord, ScenarioConfig, ScenarioResult};
use crate::calibration::LeverageCap;
use crate::error::{Error, Result};
use crate::model::FinancialSystem;

/// Grid `lower, lower + step, ..., upper` of uniform leverage caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeverageSearch {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

impl Default for LeverageSearch {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: 50.0,
            step: 0.0025,
        }
    }
}

impl LeverageSearch {
    pub fn check(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower >= 0.0 && self.upper >= self.lower) {
            return Err(Error::invalid("leverage_search", "need 0 <= lower <= upper"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("leverage_search", "step must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.upper - self.lower) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, k: usize) -> f64 {
        super::sweep::grid_point(self.lower, self.step, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Smallest stable grid point, or `None` when nothing on the grid is stable.
    pub threshold: Option<f64>,
    pub search: LeverageSearch,
    /// Every evaluated cap with its outcome, ordered by cap.
    pub evaluations: Vec<(f64, bool, ScenarioResult)>,
}

/// Bisects the stability predicate over the uniform-cap grid.
///
/// The low end is tried first and the high end second; when the high end is
/// unstable a coarse scan looks for a stable point before giving up.
pub fn min_safe_leverage(
    year_records: &[BankRecord],
    config: &ScenarioConfig,
    search: &LeverageSearch,
) -> Result<ThresholdResult> {
    if !config.counterfactual.enabled {
        let base = build(year_records, config)?.system;
        return min_safe_leverage_for(&base, config, search);
    }
    search.check()?;
    bisect(search, |cap| {
        let mut cfg = config.clone();
        cfg.calibration.leverage_cap = LeverageCap::Uniform(cap);
        let r = run(&build(year_records, &cfg)?.system, &cfg)?;
        Ok((cfg.stability.holds(&r), r))
    })
}

/// Threshold search on a fixed system, varying only its uniform leverage cap.
pub fn min_safe_leverage_for(
    system: &FinancialSystem,
    config: &ScenarioConfig,
    search: &LeverageSearch,
) -> Result<ThresholdResult> {
    search.check()?;
    bisect(search, |cap| {
        let r = run(&system.with_uniform_leverage_cap(cap)?, config)?;
        Ok((config.stability.holds(&r), r))
    })
}

fn bisect(
    search: &LeverageSearch,
    mut evaluate: impl FnMut(f64) -> Result<(bool, ScenarioResult)>,
) -> Result<ThresholdResult> {
    let mut evaluations: Vec<(usize, bool, ScenarioResult)> = Vec::new();
    let mut eval = |k: usize| -> Result<bool> {
        if let Some((_, s, _)) = evaluations.iter().find(|(j, _, _)| *j == k) {
            return Ok(*s);
        }
        let (stable, r) = evaluate(search.point(k))?;
        evaluations.push((k, stable, r));
        Ok(stable)
    };
    let last = search.len() - 1;
    let threshold = if eval(0)? {
        Some(0)
    } else {
        let mut lo = 0;
        let mut hi = if last > 0 && eval(last)? { Some(last) } else { None };
        if hi.is_none() {
            let stride = (last / 200).max(1);
            let mut k = stride;
            while k < last {
                if eval(k)? {
                    hi = Some(k);
                    break;
                }
                lo = k;
                k += stride;
            }
        }
        match hi {
            None => None,
            Some(mut hi) => {
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if eval(mid)? {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                Some(hi)
            }
        }
    };
    evaluations.sort_by_key(|(k, _, _)| *k);
    Ok(ThresholdResult {
        threshold: threshold.map(|k| search.point(k)),
        search: *search,
        evaluations: evaluations
            .into_iter()
            .map(|(k, s, r)| (search.point(k), s, r))
            .collect(),
    })
}

/// One row: `threshold,found,lower,upper,step,evaluations`.
pub fn write_threshold_csv<W: Write>(out: W, result: &ThresholdResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["threshold", "found", "lower", "upper", "step", "evaluations"])?;
    wtr.write_record([
        result.threshold.map(|t| t.to_string()).unwrap_or_default(),
        result.threshold.is_some().to_string(),
        result.search.lower.to_string(),
        result.search.upper.to_string(),
        result.search.step.to_string(),
        result.evaluations.len().to_string(),
    ])?;
    wtr.flush()?;
    Ok(())
}

/// `lambda,stable,frac_default,frac_violate,outside_frac,status` per evaluated cap.
pub fn write_evaluations_csv<W: Write>(out: W, result: &ThresholdResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "lambda",
        "stable",
        "frac_default",
        "frac_violate",
        "outside_frac",
        "status",
    ])?;
    for (cap, stable, r) in &result.evaluations {
        wtr.write_record([
            cap.to_string(),
            stable.to_string(),
            r.frac_defaulting.to_string(),
            r.frac_leverage_violating.to_string(),
            r.outside_payment_fraction.to_string(),
            r.status.as_str().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let s = LeverageSearch::default();
        assert_eq!(s.len(), 20_001);
        assert_eq!(s.point(20_000), 50.0);
        assert_eq!(s.point(7933), 19.8325);
        assert_eq!(s.point(1790), 4.475);
        let bad = LeverageSearch {
            lower: 2.0,
            upper: 1.0,
            step: 0.1,
        };
        assert!(bad.check().is_err());
    }
}
