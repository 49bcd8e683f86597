//! Inverse demand functions: units sold per asset to quoted unit prices.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Matrix;

/// Knot position of the single-asset benchmark function.
pub const BENCHMARK_KNOT: f64 = 5e7;
/// Initial slope of the single-asset benchmark function.
pub const BENCHMARK_SLOPE: f64 = 2.0 / 3e8;

pub type PriceFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub enum DemandKind {
    /// `q̄_k (1 - slope z)` up to `knot`, then `q̄_k (1 - slope knot) sqrt(knot / z)`.
    PiecewiseLinearSqrt {
        slope: f64,
        knot: f64,
    },
    /// `q̄_k (1 - (z / (scale Σ_i s_ik + guard))^exponent)^+`, with the supply bound at construction.
    PowerConcave {
        scale: f64,
        exponent: f64,
        guard: f64,
        supply: Vec<f64>,
    },
    /// Piecewise-linear through `(units, price)` knots per asset, flat past the last knot.
    Tabulated {
        knots: Vec<Vec<(f64, f64)>>,
    },
    /// `q̄ ⊙ exp(-M z)` with a nonnegative impact matrix `M`.
    CrossImpact {
        impact: Matrix,
    },
    Custom(Arc<PriceFn>),
}

impl fmt::Debug for DemandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DemandKind::PiecewiseLinearSqrt { slope, knot } => f
                .debug_struct("PiecewiseLinearSqrt")
                .field("slope", slope)
                .field("knot", knot)
                .finish(),
            DemandKind::PowerConcave {
                scale,
                exponent,
                guard,
                supply,
            } => f
                .debug_struct("PowerConcave")
                .field("scale", scale)
                .field("exponent", exponent)
                .field("guard", guard)
                .field("supply", supply)
                .finish(),
            DemandKind::Tabulated { knots } => f.debug_struct("Tabulated").field("knots", knots).finish(),
            DemandKind::CrossImpact { impact } => f.debug_struct("CrossImpact").field("impact", impact).finish(),
            DemandKind::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Price map `F` with maximum prices `q̄ = F(0)`.
#[derive(Debug, Clone)]
pub struct InverseDemand {
    kind: DemandKind,
    max_price: Vec<f64>,
}

impl InverseDemand {
    /// Single-asset benchmark: `1 - 2z/(3e8)` below `5e7`, `1e4 sqrt(2) / (3 sqrt(z))` above.
    pub fn benchmark_single_asset() -> Self {
        Self::piecewise_linear_sqrt(vec![1.0], BENCHMARK_SLOPE, BENCHMARK_KNOT).expect("benchmark parameters are valid")
    }

    pub fn piecewise_linear_sqrt(max_price: Vec<f64>, slope: f64, knot: f64) -> Result<Self> {
        check_max_price(&max_price)?;
        if !(slope >= 0.0 && slope.is_finite()) {
            return Err(Error::invalid("slope", "must be finite and nonnegative"));
        }
        if !(knot > 0.0 && knot.is_finite()) || slope * knot >= 1.0 {
            return Err(Error::invalid("knot", "must be positive with slope * knot < 1"));
        }
        Ok(Self {
            kind: DemandKind::PiecewiseLinearSqrt { slope, knot },
            max_price,
        })
    }

    /// Concave power family bound to the system-wide supply `Σ_i s_ik`.
    pub fn power_concave(max_price: Vec<f64>, supply: Vec<f64>, scale: f64, exponent: f64, guard: f64) -> Result<Self> {
        check_max_price(&max_price)?;
        if supply.len() != max_price.len() {
            return Err(Error::Dimension("supply and max prices differ in length".into()));
        }
        if supply.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("supply", "must be finite and nonnegative"));
        }
        if !(scale > 0.0 && exponent > 0.0 && guard >= 0.0) {
            return Err(Error::invalid(
                "power_concave",
                "scale and exponent must be positive, guard nonnegative",
            ));
        }
        if supply.iter().any(|s| scale * s + guard <= 0.0) {
            return Err(Error::invalid("power_concave", "zero supply needs a positive guard"));
        }
        Ok(Self {
            kind: DemandKind::PowerConcave {
                scale,
                exponent,
                guard,
                supply,
            },
            max_price,
        })
    }

    /// The multi-asset benchmark: scale `2.5^(2/3)`, exponent `3/2`, guard `1e-10`, `q̄ = 1`.
    pub fn benchmark_power(supply: Vec<f64>) -> Result<Self> {
        let m = supply.len();
        Self::power_concave(vec![1.0; m], supply, 2.5f64.powf(2.0 / 3.0), 1.5, 1e-10)
    }

    pub fn tabulated(knots: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("knots", "need at least one asset"));
        }
        let mut max_price = Vec::with_capacity(knots.len());
        for (k, table) in knots.iter().enumerate() {
            let field = format!("knots[{k}]");
            let Some(&(u0, p0)) = table.first() else {
                return Err(Error::invalid(field, "empty table"));
            };
            if u0 != 0.0 {
                return Err(Error::invalid(field, "first knot must be at 0 units"));
            }
            for w in table.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::invalid(field, "units must be strictly increasing"));
                }
                if w[1].1 > w[0].1 {
                    return Err(Error::invalid(field, "prices must be nonincreasing"));
                }
            }
            if table.iter().any(|(u, p)| !u.is_finite() || !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(field, "knots must be finite with prices >= 0"));
            }
            max_price.push(p0);
        }
        check_max_price(&max_price)?;
        Ok(Self {
            kind: DemandKind::Tabulated { knots },
            max_price,
        })
    }

    /// Reads knots from a CSV with header `asset,units,price` (assets numbered from 1).
    pub fn tabulated_from_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            asset: usize,
            units: f64,
            price: f64,
        }
        let mut reader = csv::Reader::from_path(path)?;
        let mut knots: Vec<Vec<(f64, f64)>> = Vec::new();
        for row in reader.deserialize() {
            let row: Row = row?;
            if row.asset == 0 {
                return Err(Error::Input("tabulated assets are numbered from 1".into()));
            }
            if knots.len() < row.asset {
                knots.resize(row.asset, Vec::new());
            }
            knots[row.asset - 1].push((row.units, row.price));
        }
        Self::tabulated(knots)
    }

    pub fn cross_impact(max_price: Vec<f64>, impact: Matrix) -> Result<Self> {
        check_max_price(&max_price)?;
        let m = max_price.len();
        if impact.rows() != m || impact.cols() != m {
            return Err(Error::Dimension(format!("impact matrix must be {m}x{m}")));
        }
        if impact.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("impact", "entries must be finite and nonnegative"));
        }
        Ok(Self {
            kind: DemandKind::CrossImpact { impact },
            max_price,
        })
    }

    /// Arbitrary price map. Outputs are clamped into `[0, q̄]`; no other property is enforced,
    /// so run [`validate`] before relying on it.
    pub fn custom(max_price: Vec<f64>, f: Arc<PriceFn>) -> Result<Self> {
        check_max_price(&max_price)?;
        Ok(Self {
            kind: DemandKind::Custom(f),
            max_price,
        })
    }

    pub fn kind(&self) -> &DemandKind {
        &self.kind
    }

    pub fn max_price(&self) -> &[f64] {
        &self.max_price
    }

    pub fn m(&self) -> usize {
        self.max_price.len()
    }

    /// Prices quoted when `sold` units of each asset hit the market.
    pub fn evaluate(&self, sold: &[f64]) -> Result<Vec<f64>> {
        if sold.len() != self.m() {
            return Err(Error::Dimension(format!(
                "expected {} assets, got {}",
                self.m(),
                sold.len()
            )));
        }
        if let Some(z) = sold.iter().find(|z| !(z.is_finite() && **z >= 0.0)) {
            return Err(Error::invalid("sold", format!("units must be nonnegative, got {z}")));
        }
        Ok(self.prices(sold))
    }

    /// Unchecked evaluation for internal hot loops; negative noise is read as zero.
    pub(crate) fn prices(&self, sold: &[f64]) -> Vec<f64> {
        let qbar = &self.max_price;
        let mut out: Vec<f64> = match &self.kind {
            DemandKind::PiecewiseLinearSqrt { slope, knot } => sold
                .iter()
                .zip(qbar)
                .map(|(&z, &q)| {
                    let z = z.max(0.0);
                    if z <= *knot {
                        q * (1.0 - slope * z)
                    } else {
                        q * (1.0 - slope * knot) * (knot / z).sqrt()
                    }
                })
                .collect(),
            DemandKind::PowerConcave {
                scale,
                exponent,
                guard,
                supply,
            } => sold
                .iter()
                .zip(qbar)
                .zip(supply)
                .map(|((&z, &q), &s)| {
                    let ratio = z.max(0.0) / (scale * s + guard);
                    q * (1.0 - ratio.powf(*exponent)).max(0.0)
                })
                .collect(),
            DemandKind::Tabulated { knots } => sold
                .iter()
                .zip(knots)
                .map(|(&z, table)| interpolate(table, z.max(0.0)))
                .collect(),
            DemandKind::CrossImpact { impact } => (0..qbar.len())
                .map(|k| {
                    let exposure: f64 = impact.row(k).iter().zip(sold).map(|(a, z)| a * z.max(0.0)).sum();
                    qbar[k] * (-exposure).exp()
                })
                .collect(),
            DemandKind::Custom(f) => f(sold),
        };
        for (p, q) in out.iter_mut().zip(qbar) {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, *q) };
        }
        out
    }
}

fn check_max_price(max_price: &[f64]) -> Result<()> {
    if max_price.is_empty() {
        return Err(Error::invalid("max_price", "need at least one asset"));
    }
    if max_price.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
        return Err(Error::invalid("max_price", "must be finite and positive"));
    }
    Ok(())
}

fn interpolate(table: &[(f64, f64)], z: f64) -> f64 {
    let idx = table.partition_point(|&(u, _)| u <= z);
    if idx >= table.len() {
        return table[table.len() - 1].1;
    }
    let (u0, p0) = table[idx - 1];
    let (u1, p1) = table[idx];
    p0 + (p1 - p0) * (z - u0) / (u1 - u0)
}

/// Serializable description of an inverse demand function, as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSpec {
    PiecewiseLinearSqrt {
        #[serde(default = "one")]
        max_price: f64,
        #[serde(default = "benchmark_slope")]
        slope: f64,
        #[serde(default = "benchmark_knot")]
        knot: f64,
    },
    PowerConcave {
        #[serde(default = "one")]
        max_price: f64,
        #[serde(default = "benchmark_scale")]
        scale: f64,
        #[serde(default = "benchmark_exponent")]
        exponent: f64,
        #[serde(default = "benchmark_guard")]
        guard: f64,
    },
    Tabulated {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knots: Option<Vec<Vec<(f64, f64)>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        csv: Option<String>,
    },
    CrossImpact {
        max_price: Vec<f64>,
        impact: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}
fn benchmark_slope() -> f64 {
    BENCHMARK_SLOPE
}
fn benchmark_knot() -> f64 {
    BENCHMARK_KNOT
}
fn benchmark_scale() -> f64 {
    2.5f64.powf(2.0 / 3.0)
}
fn benchmark_exponent() -> f64 {
    1.5
}
fn benchmark_guard() -> f64 {
    1e-10
}

impl Default for DemandSpec {
    fn default() -> Self {
        DemandSpec::PiecewiseLinearSqrt {
            max_price: 1.0,
            slope: BENCHMARK_SLOPE,
            knot: BENCHMARK_KNOT,
        }
    }
}

impl DemandSpec {
    /// Maximum prices for `m` assets, known before holdings are sampled.
    pub fn max_price(&self, m: usize) -> Result<Vec<f64>> {
        match self {
            DemandSpec::PiecewiseLinearSqrt { max_price, .. } | DemandSpec::PowerConcave { max_price, .. } => {
                Ok(vec![*max_price; m])
            }
            DemandSpec::CrossImpact { max_price, .. } => Ok(max_price.clone()),
            DemandSpec::Tabulated { .. } => Ok(self.resolve()?.build(m, &Matrix::zeros(0, m))?.max_price),
        }
    }

    /// Inlines a tabulated CSV so the configuration is self-contained.
    pub fn resolve(&self) -> Result<Self> {
        match self {
            DemandSpec::Tabulated {
                knots: None,
                csv: Some(path),
            } => {
                let f = InverseDemand::tabulated_from_csv(Path::new(path))?;
                let DemandKind::Tabulated { knots } = f.kind else {
                    unreachable!()
                };
                Ok(DemandSpec::Tabulated {
                    knots: Some(knots),
                    csv: None,
                })
            }
            other => Ok(other.clone()),
        }
    }

    /// Builds `F` for `m` assets; the power family binds the column sums of `holdings`.
    pub fn build(&self, m: usize, holdings: &Matrix) -> Result<InverseDemand> {
        let f = match self {
            DemandSpec::PiecewiseLinearSqrt { max_price, slope, knot } => {
                InverseDemand::piecewise_linear_sqrt(vec![*max_price; m], *slope, *knot)?
            }
            DemandSpec::PowerConcave {
                max_price,
                scale,
                exponent,
                guard,
            } => InverseDemand::power_concave(vec![*max_price; m], holdings.column_sums(), *scale, *exponent, *guard)?,
            DemandSpec::Tabulated { knots: Some(k), .. } => InverseDemand::tabulated(k.clone())?,
            DemandSpec::Tabulated { csv: Some(path), .. } => InverseDemand::tabulated_from_csv(Path::new(path))?,
            DemandSpec::Tabulated { .. } => return Err(Error::Input("tabulated demand needs `knots` or `csv`".into())),
            DemandSpec::CrossImpact { max_price, impact } => {
                InverseDemand::cross_impact(max_price.clone(), Matrix::from_rows(impact)?)?
            }
        };
        if f.m() != m {
            return Err(Error::Dimension(format!(
                "inverse demand has {} assets, system has {m}",
                f.m()
            )));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    pub grid_points: usize,
    pub base_points: usize,
    pub random_pairs: usize,
    pub segments: usize,
    pub points_per_segment: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            grid_points: 65,
            base_points: 16,
            random_pairs: 2_000,
            segments: 1_000,
            points_per_segment: 50,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Sampled pairs `z <= z'` with `F(z') > F(z)` in some component.
    pub monotonicity_violations: usize,
    pub worst_monotonicity_excess: f64,
    pub price_at_supply: Vec<f64>,
    pub positive_at_supply: bool,
    /// Firms whose valuation `β ↦ s_i^T F(β)` dipped below quasi-concavity on a segment.
    pub quasi_concavity_violations: Vec<(usize, usize)>,
}

impl ValidationReport {
    /// Monotonicity and positivity; both are required for equilibrium runs.
    pub fn hard_checks_pass(&self) -> bool {
        self.monotonicity_violations == 0 && self.positive_at_supply
    }

    pub fn quasi_concave_clean(&self) -> bool {
        self.quasi_concavity_violations.is_empty()
    }
}

/// Sampled checks of monotonicity, `F(Σ_i s_i) > 0`, and quasi-concavity of each firm's valuation.
pub fn validate(f: &InverseDemand, holdings: &Matrix, opts: &ValidationOptions) -> ValidationReport {
    let m = f.m();
    let supply = holdings.column_sums();
    let upper: Vec<f64> = supply.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let slack = |a: f64| 1e-12 * (1.0 + a.abs());

    let mut violations = 0;
    let mut worst: f64 = 0.0;
    let mut record = |lo: &[f64], hi: &[f64]| {
        for (a, b) in lo.iter().zip(hi) {
            let excess = b - a;
            if excess > slack(*a) {
                violations += 1;
                worst = worst.max(excess);
            }
        }
    };

    let steps = opts.grid_points.max(2) - 1;
    for base_idx in 0..=opts.base_points {
        let base: Vec<f64> = if base_idx == 0 {
            vec![0.0; m]
        } else {
            upper.iter().map(|u| rng.random::<f64>() * u).collect()
        };
        for k in 0..m {
            let mut z = base.clone();
            z[k] = 0.0;
            let mut prev = f.prices(&z);
            for step in 1..=steps {
                z[k] = upper[k] * step as f64 / steps as f64;
                let cur = f.prices(&z);
                record(&prev, &cur);
                prev = cur;
            }
        }
    }
    for _ in 0..opts.random_pairs {
        let lo: Vec<f64> = upper.iter().map(|u| rng.random::<f64>() * u).collect();
        let hi: Vec<f64> = lo
            .iter()
            .zip(&upper)
            .map(|(l, u)| l + rng.random::<f64>() * (u - l))
            .collect();
        record(&f.prices(&lo), &f.prices(&hi));
    }

    let price_at_supply = f.prices(&supply);
    let positive_at_supply = price_at_supply.iter().all(|&p| p > 0.0);

    let mut qc = Vec::new();
    let npts = opts.points_per_segment.max(3);
    for i in 0..holdings.rows() {
        let s = holdings.row(i);
        if s.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut count = 0;
        let mut values = vec![0.0; npts];
        for _ in 0..opts.segments {
            let a: Vec<f64> = upper.iter().map(|u| rng.random::<f64>() * u).collect();
            let b: Vec<f64> = upper.iter().map(|u| rng.random::<f64>() * u).collect();
            for (j, v) in values.iter_mut().enumerate() {
                let t = j as f64 / (npts - 1) as f64;
                let beta: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect();
                *v = f.prices(&beta).iter().zip(s).map(|(p, h)| p * h).sum();
            }
            if !is_quasi_concave(&values, opts.tol) {
                count += 1;
            }
        }
        if count > 0 {
            qc.push((i + 1, count));
        }
    }

    ValidationReport {
        monotonicity_violations: violations,
        worst_monotonicity_excess: worst,
        price_at_supply,
        positive_at_supply,
        quasi_concavity_violations: qc,
    }
}

/// Along a sampled segment, every interior value must reach the smaller of the best values on
/// either side.
fn is_quasi_concave(values: &[f64], tol: f64) -> bool {
    let n = values.len();
    let mut suffix_max = vec![f64::NEG_INFINITY; n + 1];
    for j in (0..n).rev() {
        suffix_max[j] = suffix_max[j + 1].max(values[j]);
    }
    let mut prefix_max = f64::NEG_INFINITY;
    for j in 0..n {
        if j > 0 && j + 1 < n {
            let floor = prefix_max.min(suffix_max[j + 1]);
            if values[j] < floor - tol * (1.0 + floor.abs()) {
                return false;
            }
        }
        prefix_max = prefix_max.max(values[j]);
    }
    true
}
