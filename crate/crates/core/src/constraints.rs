//! Linear constraints of the factorization.
//!
//! The monthly constraint ties the factorization to sector consumption:
//! `B C A ≈ Y`, where `B` (m×n) sums daily energy-weighted concentrations into
//! months, `A` (K×g) maps sources onto sectors and `Y` (m×g) holds the target
//! monthly sector consumption in MWh. The row-sum constraint on the sources is
//! the general `F S D ≈ Z` with `F = I_K`, `D = 1_p` and `Z = 1_K`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::calendar::{DayLabel, YearMonth};
use crate::error::{Error, Result};

/// Sweeps of alternating proportional scaling before giving up.
const MAX_SCALING_SWEEPS: usize = 100_000;
/// Relative accuracy at which proportional scaling stops.
const SCALING_TOL: f64 = 1e-13;
/// Relative accuracy the scaled `Y` must reach on both margins.
pub const Y_MARGIN_TOL: f64 = 1e-6;

/// `B C A ≈ Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthlyConstraint {
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub y: Array2<f64>,
}

/// `F S D ≈ Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceConstraint {
    pub f: Array2<f64>,
    pub d: Array2<f64>,
    pub z: Array2<f64>,
}

impl SourceConstraint {
    /// Every source row sums to one.
    pub fn row_sum(k: usize, p: usize) -> Self {
        SourceConstraint {
            f: Array2::eye(k),
            d: Array2::ones((p, 1)),
            z: Array2::ones((k, 1)),
        }
    }
}

/// Both constraint families; an absent family contributes no penalty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    pub monthly: Option<MonthlyConstraint>,
    pub sources: Option<SourceConstraint>,
}

impl ConstraintSet {
    pub fn none() -> Self {
        ConstraintSet::default()
    }

    pub fn new(monthly: Option<MonthlyConstraint>, sources: Option<SourceConstraint>) -> Self {
        ConstraintSet { monthly, sources }
    }

    /// Monthly constraint plus the standard source row-sum constraint.
    pub fn with_row_sum(b: Array2<f64>, a: Array2<f64>, y: Array2<f64>, p: usize) -> Self {
        let k = a.nrows();
        ConstraintSet {
            monthly: Some(MonthlyConstraint { b, a, y }),
            sources: Some(SourceConstraint::row_sum(k, p)),
        }
    }

    /// Checks that every matrix conforms with `X` (n×p) and `K` sources.
    pub fn check_dims(&self, n: usize, k: usize, p: usize) -> Result<()> {
        if let Some(mc) = &self.monthly {
            let (m, bn) = mc.b.dim();
            let (ak, g) = mc.a.dim();
            if bn != n {
                return Err(Error::DimensionMismatch(format!("B has {bn} columns, X has {n} rows")));
            }
            if ak != k {
                return Err(Error::DimensionMismatch(format!("A has {ak} rows, expected K = {k}")));
            }
            if mc.y.dim() != (m, g) {
                return Err(Error::DimensionMismatch(format!(
                    "Y is {:?}, expected ({m}, {g})",
                    mc.y.dim()
                )));
            }
        }
        if let Some(sc) = &self.sources {
            let (l, fk) = sc.f.dim();
            let (dp, q) = sc.d.dim();
            if fk != k {
                return Err(Error::DimensionMismatch(format!("F has {fk} columns, expected K = {k}")));
            }
            if dp != p {
                return Err(Error::DimensionMismatch(format!("D has {dp} rows, expected p = {p}")));
            }
            if sc.z.dim() != (l, q) {
                return Err(Error::DimensionMismatch(format!(
                    "Z is {:?}, expected ({l}, {q})",
                    sc.z.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Block matrix `B`: row `r` carries the energies of the days of month `r`.
///
/// Returns `B` and the months of its rows. Days must be sorted by date; a
/// calendar month lying between the first and last day without any day is an
/// [`Error::EmptyMonth`].
pub fn build_b(energy: ArrayView1<f64>, calendar: &[DayLabel]) -> Result<(Array2<f64>, Vec<YearMonth>)> {
    if energy.len() != calendar.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} energies for {} days",
            energy.len(),
            calendar.len()
        )));
    }
    if calendar.windows(2).any(|w| w[0].date >= w[1].date) {
        return Err(Error::NonMonotonicTime {
            at: "calendar".into(),
            reason: "days are not sorted by date".into(),
        });
    }
    let Some(first) = calendar.first() else {
        return Ok((Array2::zeros((0, 0)), Vec::new()));
    };
    let last = calendar.last().unwrap().month();
    let mut months = Vec::new();
    let mut ym = first.month();
    while ym <= last {
        months.push(ym);
        ym = ym.succ();
    }
    let row_of: BTreeMap<YearMonth, usize> = months.iter().enumerate().map(|(r, &m)| (m, r)).collect();
    let mut b = Array2::zeros((months.len(), calendar.len()));
    let mut seen = vec![false; months.len()];
    for (i, label) in calendar.iter().enumerate() {
        let r = row_of[&label.month()];
        b[[r, i]] = energy[i];
        seen[r] = true;
    }
    if let Some(r) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyMonth(months[r].to_string()));
    }
    Ok((b, months))
}

/// Assignment of sources to sectors (the surjection σ), sector by sector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectorMap {
    pub names: Vec<String>,
    /// `sources[j]` lists the 0-based source indices of sector `j`.
    pub sources: Vec<Vec<usize>>,
}

impl Default for SectorMap {
    /// Household, industry and services with one source each.
    fn default() -> Self {
        SectorMap::one_to_one(&["household", "industry", "services"])
    }
}

impl SectorMap {
    pub fn new(names: Vec<String>, sources: Vec<Vec<usize>>) -> Self {
        SectorMap { names, sources }
    }

    /// One source per sector, in order.
    pub fn one_to_one(names: &[&str]) -> Self {
        SectorMap {
            names: names.iter().map(|s| s.to_string()).collect(),
            sources: (0..names.len()).map(|k| vec![k]).collect(),
        }
    }

    /// Two household, one industry, two services sources.
    pub fn default_five() -> Self {
        SectorMap {
            names: vec!["household".into(), "industry".into(), "services".into()],
            sources: vec![vec![0, 1], vec![2], vec![3, 4]],
        }
    }

    pub fn n_sectors(&self) -> usize {
        self.names.len()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.iter().map(Vec::len).sum()
    }

    /// Sector of every source; validates the assignment.
    pub fn sector_of(&self, k: usize) -> Result<Vec<usize>> {
        if self.names.len() != self.sources.len() {
            return Err(Error::Config(format!(
                "{} sector names for {} source lists",
                self.names.len(),
                self.sources.len()
            )));
        }
        let mut owner: Vec<Option<usize>> = vec![None; k];
        for (j, list) in self.sources.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::NotSurjective(j));
            }
            for &src in list {
                if src >= k {
                    return Err(Error::Config(format!("source index {src} out of range for K = {k}")));
                }
                if owner[src].is_some() {
                    return Err(Error::MultiAssignment(src));
                }
                owner[src] = Some(j);
            }
        }
        owner
            .into_iter()
            .enumerate()
            .map(|(src, o)| o.ok_or(Error::UnassignedSource { source_index: src }))
            .collect()
    }

    /// The K×g 0/1 matrix `A` with `A[i, j] = 1` iff source `i` belongs to sector `j`.
    pub fn build_a(&self, k: usize) -> Result<Array2<f64>> {
        let owner = self.sector_of(k)?;
        let mut a = Array2::zeros((k, self.n_sectors()));
        for (i, j) in owner.into_iter().enumerate() {
            a[[i, j]] = 1.0;
        }
        Ok(a)
    }
}

/// One row of the monthly indicator table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyIndicator {
    pub sector: String,
    pub month: YearMonth,
    pub value: f64,
}

/// One row of the annual consumption table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualConsumption {
    pub sector: String,
    pub year: i32,
    pub consumption_mwh: f64,
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                line: i + 2,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Monthly sector indicators, `sector,month,value`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndicatorTable {
    pub rows: Vec<MonthlyIndicator>,
}

impl IndicatorTable {
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<MonthlyIndicator> = read_table(path)?;
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !(r.value >= 0.0) || !r.value.is_finite() {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: 0,
                    reason: format!("indicator {} {} must be non-negative, got {}", r.sector, r.month, r.value),
                });
            }
            if !seen.insert((r.sector.clone(), r.month)) {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: 0,
                    reason: format!("indicator {} {} given twice", r.sector, r.month),
                });
            }
        }
        Ok(IndicatorTable { rows })
    }

    pub fn get(&self, sector: &str, month: YearMonth) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sector == sector && r.month == month)
            .map(|r| r.value)
    }

    /// m×g matrix of indicator values for the given months and sectors.
    pub fn matrix(&self, sectors: &[String], months: &[YearMonth]) -> Result<Array2<f64>> {
        let index: BTreeMap<(&str, YearMonth), f64> = self
            .rows
            .iter()
            .map(|r| ((r.sector.as_str(), r.month), r.value))
            .collect();
        let mut y = Array2::zeros((months.len(), sectors.len()));
        for (r, &month) in months.iter().enumerate() {
            for (j, sector) in sectors.iter().enumerate() {
                y[[r, j]] = *index.get(&(sector.as_str(), month)).ok_or_else(|| Error::MissingMonth {
                    sector: sector.clone(),
                    month: month.to_string(),
                })?;
            }
        }
        Ok(y)
    }
}

/// Annual sector consumption, `sector,year,consumption_mwh`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnualTable {
    pub rows: Vec<AnnualConsumption>,
}

impl AnnualTable {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(AnnualTable { rows: read_table(path)? })
    }

    /// Per-sector totals over `years`. Every year must be present; rows for
    /// other years are ignored.
    pub fn sector_totals(&self, sectors: &[String], years: &[i32]) -> Result<Vec<f64>> {
        let wanted: BTreeSet<i32> = years.iter().copied().collect();
        let mut totals = Vec::with_capacity(sectors.len());
        for sector in sectors {
            let rows: Vec<_> = self
                .rows
                .iter()
                .filter(|r| &r.sector == sector && wanted.contains(&r.year))
                .collect();
            let have: BTreeSet<i32> = rows.iter().map(|r| r.year).collect();
            if have != wanted {
                let missing: Vec<_> = wanted.difference(&have).collect();
                return Err(Error::PeriodMismatch(format!(
                    "annual consumption for {sector} lacks years {missing:?} covered by the load"
                )));
            }
            totals.push(rows.iter().map(|r| r.consumption_mwh).sum());
        }
        Ok(totals)
    }
}

/// Rescales the indicator matrix into MWh.
///
/// Columns are scaled to the annual weights `w`, then rows to the monthly
/// totals; the two scalings alternate until both margins hold.
pub fn build_y(indicators: &Array2<f64>, w: &[f64], monthly_totals: &[f64]) -> Result<Array2<f64>> {
    let (m, g) = indicators.dim();
    if w.len() != g || monthly_totals.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "indicators are {m}×{g}, got {} weights and {} monthly totals",
            w.len(),
            monthly_totals.len()
        )));
    }
    for j in 0..g {
        if indicators.column(j).sum() <= 0.0 {
            return Err(Error::ZeroIndicatorColumn(format!("#{j}")));
        }
    }
    let w_total: f64 = w.iter().sum();
    let m_total: f64 = monthly_totals.iter().sum();
    if (w_total - m_total).abs() > 1e-9 * m_total.abs().max(w_total.abs()) {
        return Err(Error::PeriodMismatch(format!(
            "sector weights sum to {w_total} but monthly energy sums to {m_total}"
        )));
    }

    let mut y = indicators.clone();
    let w = Array1::from(w.to_vec());
    let totals = Array1::from(monthly_totals.to_vec());
    let margin_error = |y: &Array2<f64>| -> f64 {
        let cols = y.sum_axis(ndarray::Axis(0));
        let rows = y.sum_axis(ndarray::Axis(1));
        let c = cols
            .iter()
            .zip(w.iter())
            .map(|(a, b)| rel(*a, *b))
            .fold(0.0, f64::max);
        let r = rows
            .iter()
            .zip(totals.iter())
            .map(|(a, b)| rel(*a, *b))
            .fold(0.0, f64::max);
        c.max(r)
    };

    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SCALING_SWEEPS {
        let cols = y.sum_axis(ndarray::Axis(0));
        for j in 0..g {
            let s = w[j] / cols[j];
            y.column_mut(j).mapv_inplace(|v| v * s);
        }
        let rows = y.sum_axis(ndarray::Axis(1));
        for r in 0..m {
            if rows[r] > 0.0 {
                let s = totals[r] / rows[r];
                y.row_mut(r).mapv_inplace(|v| v * s);
            }
        }
        residual = margin_error(&y);
        if residual <= SCALING_TOL {
            break;
        }
    }
    if residual > Y_MARGIN_TOL {
        return Err(Error::ScalingNotConverged {
            iters: MAX_SCALING_SWEEPS,
            residual,
        });
    }
    Ok(y)
}

fn rel(actual: f64, target: f64) -> f64 {
    if target == 0.0 {
        actual.abs()
    } else {
        ((actual - target) / target).abs()
    }
}
