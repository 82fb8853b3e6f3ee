//! Non-blind disaggregation of new load curves with fixed sources.
//!
//! With `S` fixed, estimating the concentrations of new curves is the convex
//! problem `min_{C ≥ 0} ‖X₀ − CS‖²_F`, which has a unique minimizer when `S`
//! has full row rank. Concentrations are first refined with multiplicative
//! updates of `C` alone, then finished with an active-set (Lawson–Hanson)
//! pass warm-started from the multiplicative iterate. The finishing pass
//! enforces the optimality conditions exactly, which plain multiplicative
//! updates only approach at a sublinear rate when the optimum has zeros.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{DayLabel, YearMonth};
use crate::constraints::{build_b, IndicatorTable};
use crate::error::{Error, Result};
use crate::nnls::nnls_gram;
use crate::solver::{FactorPair, StallCounter};
use crate::stats::{mean_and_band, pearson};

/// Ratio of extreme singular values of `S` beyond which it counts as rank deficient.
const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub window: usize,
    pub eps_floor: f64,
    /// Finish with an exact active-set pass.
    pub polish: bool,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            max_iters: 2000,
            rel_tol: 1e-8,
            window: 10,
            eps_floor: 1e-12,
            polish: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// n₀×K concentrations.
    pub c0: Array2<f64>,
    /// ‖X₀ − C₀S‖²_F
    pub loss: f64,
    pub iters: usize,
    pub converged: bool,
    /// ‖x₀ᵢ − c₀ᵢS‖₂ per day; large values flag curves outside the source cone.
    pub residual_per_day: Vec<f64>,
}

/// Condition number of `S` (ratio of its extreme singular values).
pub fn source_condition(s: ArrayView2<f64>) -> f64 {
    let (k, p) = s.dim();
    let m = DMatrix::from_fn(k, p, |i, j| s[[i, j]]);
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Concentrations of new curves `x0` (n₀×p) on the fixed sources `s` (K×p).
pub fn project(x0: ArrayView2<f64>, s: ArrayView2<f64>, config: &ProjectionConfig) -> Result<Projection> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, k) = (x0.nrows(), s.nrows());
    let init = Array2::from_shape_fn((n, k), |_| -> f64 { Exp1.sample(&mut rng) });
    let init = &init / &init.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    project_from(x0, s, init, config)
}

/// As [`project`], from a caller-supplied non-negative starting point.
pub fn project_from(
    x0: ArrayView2<f64>,
    s: ArrayView2<f64>,
    init: Array2<f64>,
    config: &ProjectionConfig,
) -> Result<Projection> {
    let (n, p) = x0.dim();
    let (k, sp) = s.dim();
    if sp != p || init.dim() != (n, k) {
        return Err(Error::DimensionMismatch(format!(
            "X0 is {n}×{p}, S is {k}×{sp}, initial C is {:?}",
            init.dim()
        )));
    }
    if !(config.eps_floor > 0.0) || !(config.rel_tol > 0.0) || config.window == 0 {
        return Err(Error::Config("invalid projection tolerances".into()));
    }
    let cond = source_condition(s);
    if !(cond < MAX_CONDITION) {
        return Err(Error::RankDeficientSources(cond));
    }

    let xst = x0.dot(&s.t()); // n×K
    let sst = s.dot(&s.t()); // K×K
    let objective = |c: &Array2<f64>| -> f64 {
        let r = &x0 - &c.dot(&s);
        r.iter().map(|v| v * v).sum()
    };

    let mut c = init;
    let mut current = objective(&c);
    let mut stall = StallCounter::new(config.rel_tol, config.window);
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        let den = c.dot(&sst);
        ndarray::Zip::from(&mut c)
            .and(&xst)
            .and(&den)
            .for_each(|cv, &num, &d| *cv *= num / (d + config.eps_floor));
        iters += 1;
        let next = objective(&c);
        if !next.is_finite() {
            return Err(Error::Diverged { iter: iters, loss: next });
        }
        let prev = current;
        current = next;
        if stall.push(prev, next) {
            converged = true;
            break;
        }
    }

    if config.polish {
        let gram = DMatrix::from_fn(k, k, |i, j| sst[[i, j]]);
        for i in 0..n {
            let rhs = DVector::from_iterator(k, xst.row(i).iter().copied());
            let start: Vec<f64> = c.row(i).to_vec();
            let refined = nnls_gram(&gram, &rhs, &start);
            for (j, v) in refined.into_iter().enumerate() {
                c[[i, j]] = v;
            }
        }
        current = objective(&c);
        converged = true;
    }

    let fitted = c.dot(&s);
    let residual_per_day = (0..n)
        .map(|i| {
            x0.row(i)
                .iter()
                .zip(fitted.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(Projection {
        c0: c,
        loss: current,
        iters,
        converged,
        residual_per_day,
    })
}

/// Projects `x0` onto the sources of every solution, concurrently; output in
/// solution order.
pub fn project_ensemble(
    x0: ArrayView2<f64>,
    solutions: &[FactorPair],
    config: &ProjectionConfig,
) -> Result<Vec<Projection>> {
    solutions
        .par_iter()
        .enumerate()
        .map(|(l, sol)| {
            let cfg = ProjectionConfig {
                seed: config.seed.wrapping_add(l as u64),
                ..config.clone()
            };
            project(x0, sol.s.view(), &cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonthlyEstimate {
    pub sector: usize,
    pub month: YearMonth,
    pub energy: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Monthly sector consumption `B₀C₀A` per solution, averaged across solutions
/// with quantile bands. Rows are month-major, then sector.
pub fn monthly_consumption(
    c0s: &[Array2<f64>],
    energy: ArrayView1<f64>,
    a: ArrayView2<f64>,
    calendar: &[DayLabel],
) -> Result<Vec<MonthlyEstimate>> {
    if c0s.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let (b0, months) = build_b(energy, calendar)?;
    let per_solution: Vec<Array2<f64>> = c0s
        .iter()
        .map(|c| {
            if c.nrows() != b0.ncols() || c.ncols() != a.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "C0 is {:?}, expected ({}, {})",
                    c.dim(),
                    b0.ncols(),
                    a.nrows()
                )));
            }
            Ok(b0.dot(c).dot(&a))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(months.len() * a.ncols());
    let mut buf = vec![0.0; c0s.len()];
    for (r, &month) in months.iter().enumerate() {
        for j in 0..a.ncols() {
            for (l, z) in per_solution.iter().enumerate() {
                buf[l] = z[[r, j]];
            }
            let (energy, q025, q975) = mean_and_band(&mut buf);
            out.push(MonthlyEstimate {
                sector: j,
                month,
                energy,
                q025,
                q975,
            });
        }
    }
    Ok(out)
}

/// Pearson correlations of one sector's monthly series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub sector: String,
    pub months: usize,
    /// Estimates against indicators.
    pub bss: f64,
    /// Previous year's indicators against indicators.
    pub naive: f64,
}

/// Correlation of `estimate` and of `lagged` with `reference`.
pub fn score_series(estimate: &[f64], reference: &[f64], lagged: &[f64]) -> Result<(f64, f64)> {
    let n = reference.len();
    if estimate.len() != n || lagged.len() != n {
        return Err(Error::ShapeMismatch("series lengths differ".into()));
    }
    if n < 3 {
        return Err(Error::InsufficientMonths(n));
    }
    let r = |a: &[f64]| pearson(a, reference).unwrap_or(f64::NAN);
    Ok((r(estimate), r(lagged)))
}

/// Per-sector correlation table against the indicators, with the one-year-lag
/// naive baseline.
pub fn score(
    estimates: &[MonthlyEstimate],
    indicators: &IndicatorTable,
    sectors: &[String],
) -> Result<Vec<CorrelationRow>> {
    sectors
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let rows: Vec<&MonthlyEstimate> = estimates.iter().filter(|e| e.sector == j).collect();
            let lookup = |m: YearMonth| {
                indicators.get(name, m).ok_or_else(|| Error::MissingMonth {
                    sector: name.clone(),
                    month: m.to_string(),
                })
            };
            let est: Vec<f64> = rows.iter().map(|e| e.energy).collect();
            let reference: Vec<f64> = rows.iter().map(|e| lookup(e.month)).collect::<Result<_>>()?;
            let lagged: Vec<f64> = rows.iter().map(|e| lookup(e.month.prev_year())).collect::<Result<_>>()?;
            let (bss, naive) = score_series(&est, &reference, &lagged)?;
            Ok(CorrelationRow {
                sector: name.clone(),
                months: rows.len(),
                bss,
                naive,
            })
        })
        .collect()
}

/// Largest per-day residual, for reporting.
pub fn max_residual(projections: &[Projection]) -> f64 {
    projections
        .iter()
        .flat_map(|p| p.residual_per_day.iter().copied())
        .fold(0.0, f64::max)
}

/// Mean concentration row sum across projections, per day.
pub fn mean_row_sums(projections: &[Projection]) -> Array1<f64> {
    let n = projections.first().map_or(0, |p| p.c0.nrows());
    let mut acc = Array1::zeros(n);
    for p in projections {
        acc += &p.c0.sum_axis(ndarray::Axis(1));
    }
    acc / projections.len().max(1) as f64
}
