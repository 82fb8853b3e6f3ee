//! Randomized restarts, loss clustering and ensemble estimates.
//!
//! The factorization is non-convex, so it is run from many random
//! concentration initializations. Runs whose converged loss falls in the
//! lowest cluster are kept, their sources are aligned within each sector, and
//! estimates are averaged across the retained solutions with empirical
//! 2.5% / 97.5% quantile bands.

use itertools::Itertools;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{DayLabel, DayType, Season};
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::solver::{self, FactorPair, LossTerms, SolverConfig, SolverResult};
use crate::stats::mean_and_band;

/// Outcome of one randomized run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    /// `Err` holds the failure message of a diverged run.
    pub result: std::result::Result<SolverResult, String>,
}

impl RunOutcome {
    pub fn loss(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.terms.total)
    }
}

/// Runs `n_runs` independent fits with seeds `base_seed .. base_seed + n_runs`.
///
/// Runs execute in parallel on the current rayon pool; the output is ordered
/// by seed. Loss traces are dropped except for their final value.
pub fn run_ensemble(
    x: ArrayView2<f64>,
    cons: &ConstraintSet,
    config: &SolverConfig,
    n_runs: usize,
    base_seed: u64,
) -> Result<Vec<RunOutcome>> {
    if n_runs == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    config.validate()?;
    let (n, p) = x.dim();
    let k = match (&cons.monthly, &cons.sources) {
        (Some(mc), _) => mc.a.nrows(),
        (None, Some(sc)) => sc.f.ncols(),
        (None, None) => {
            return Err(Error::Config(
                "ensemble runs need constraints to fix the number of sources".into(),
            ))
        }
    };
    cons.check_dims(n, k, p)?;
    Ok((0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let init = solver::init_factors(n, k, p, seed);
            let cfg = SolverConfig { seed, ..config.clone() };
            let result = solver::fit(x, cons, &cfg, init)
                .map(|mut r| {
                    let last = *r.loss_trace.last().unwrap();
                    r.loss_trace = vec![last];
                    r
                })
                .map_err(|e| e.to_string());
            RunOutcome { seed, result }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum ClusterMode {
    /// Keep losses at or below the value.
    Threshold(f64),
    /// Split the sorted losses at their largest consecutive gap and keep the
    /// lower group. Gaps below `1e-6` times the smallest loss count as
    /// roundoff; if all gaps are that small every run is kept.
    AutoGap,
}

impl Default for ClusterMode {
    fn default() -> Self {
        ClusterMode::Threshold(0.01)
    }
}

/// Indices of the retained losses, ascending. Non-finite losses are never retained.
pub fn cluster_solutions(losses: &[f64], mode: ClusterMode) -> Result<Vec<usize>> {
    let finite: Vec<(usize, f64)> = losses
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .collect();
    let cutoff = match mode {
        ClusterMode::Threshold(t) => t,
        ClusterMode::AutoGap => {
            let mut sorted: Vec<f64> = finite.iter().map(|&(_, l)| l).collect();
            sorted.sort_by(f64::total_cmp);
            let floor = sorted.first().map_or(0.0, |l| 1e-6 * l.abs());
            let mut best: Option<(f64, f64)> = None;
            for w in sorted.windows(2) {
                let gap = w[1] - w[0];
                if gap > floor && best.is_none_or(|(g, _)| gap > g) {
                    best = Some((gap, w[0]));
                }
            }
            match best {
                Some((_, lower)) => lower,
                None => sorted.last().copied().unwrap_or(f64::NEG_INFINITY),
            }
        }
    };
    let kept: Vec<usize> = finite.iter().filter(|&&(_, l)| l <= cutoff).map(|&(i, _)| i).collect();
    if kept.is_empty() {
        return Err(Error::EmptyCluster);
    }
    Ok(kept)
}

/// Sector index of each source, read off the 0/1 mapping matrix.
pub fn sectors_of_sources(a: ArrayView2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|r| r.iter().position(|&v| v != 0.0).unwrap_or(0))
        .collect()
}

/// Within-sector permutation of every solution's sources that brings them
/// closest to the first solution.
///
/// `perm[new] = old`: the aligned solution's source `new` is the original
/// source `perm[new]`. Sources never move across sectors.
pub fn align_sources(solutions: &[FactorPair], a: ArrayView2<f64>) -> Vec<Vec<usize>> {
    let Some(reference) = solutions.first() else {
        return Vec::new();
    };
    let sector_of = sectors_of_sources(a);
    let k = sector_of.len();
    let blocks: Vec<Vec<usize>> = (0..a.ncols())
        .map(|j| (0..k).filter(|&i| sector_of[i] == j).collect())
        .collect();
    solutions
        .iter()
        .map(|sol| {
            let mut perm: Vec<usize> = (0..k).collect();
            for block in blocks.iter().filter(|b| b.len() > 1) {
                let best = block
                    .iter()
                    .copied()
                    .permutations(block.len())
                    .map(|candidate| {
                        let cost: f64 = block
                            .iter()
                            .zip(&candidate)
                            .map(|(&r, &c)| row_distance(reference.s.row(r), sol.s.row(c)))
                            .sum();
                        (cost, candidate)
                    })
                    // strict comparison keeps the identity on ties
                    .fold(None::<(f64, Vec<usize>)>, |acc, (cost, cand)| match acc {
                        Some((best, _)) if best <= cost => acc,
                        _ => Some((cost, cand)),
                    })
                    .unwrap()
                    .1;
                for (&slot, src) in block.iter().zip(best) {
                    perm[slot] = src;
                }
            }
            perm
        })
        .collect()
}

fn row_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Reorders sources (rows of `S`, columns of `C`) by `perm[new] = old`.
pub fn apply_permutation(f: &FactorPair, perm: &[usize]) -> FactorPair {
    FactorPair {
        c: f.c.select(ndarray::Axis(1), perm),
        s: f.s.select(ndarray::Axis(0), perm),
    }
}

/// Index of the solution whose `S` has the least summed Euclidean distance to
/// all the others.
pub fn geometric_medoid(solutions: &[FactorPair]) -> usize {
    let dist = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    (0..solutions.len())
        .map(|i| {
            let total: f64 = solutions.iter().map(|o| dist(&solutions[i].s, &o.s)).sum();
            (i, total)
        })
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0
}

/// The retained, aligned cluster of solutions.
#[derive(Debug, Clone)]
pub struct SolutionEnsemble {
    /// Aligned retained factors, ordered by seed.
    pub solutions: Vec<FactorPair>,
    pub seeds: Vec<u64>,
    pub terms: Vec<LossTerms>,
    /// Converged loss of every run, `None` for failed runs.
    pub losses_all: Vec<(u64, Option<f64>)>,
    /// Largest retained loss.
    pub threshold: f64,
    pub alignment: Vec<Vec<usize>>,
    /// Index into `solutions`.
    pub medoid: usize,
    pub failed: usize,
}

impl SolutionEnsemble {
    pub fn from_runs(runs: &[RunOutcome], mode: ClusterMode, a: ArrayView2<f64>) -> Result<Self> {
        let losses: Vec<f64> = runs.iter().map(|r| r.loss().unwrap_or(f64::NAN)).collect();
        let kept = cluster_solutions(&losses, mode)?;
        let raw: Vec<FactorPair> = kept
            .iter()
            .map(|&i| runs[i].result.as_ref().unwrap().factors.clone())
            .collect();
        let alignment = align_sources(&raw, a);
        let solutions: Vec<FactorPair> = raw.iter().zip(&alignment).map(|(f, p)| apply_permutation(f, p)).collect();
        let medoid = geometric_medoid(&solutions);
        Ok(SolutionEnsemble {
            seeds: kept.iter().map(|&i| runs[i].seed).collect(),
            terms: kept.iter().map(|&i| runs[i].result.as_ref().unwrap().terms).collect(),
            losses_all: runs.iter().map(|r| (r.seed, r.loss())).collect(),
            threshold: kept.iter().map(|&i| losses[i]).fold(f64::NEG_INFINITY, f64::max),
            failed: runs.iter().filter(|r| r.result.is_err()).count(),
            solutions,
            alignment,
            medoid,
        })
    }

    pub fn medoid_s(&self) -> &Array2<f64> {
        &self.solutions[self.medoid].s
    }

    /// Largest `|Σ_k c_ik − 1|` over days and solutions.
    pub fn concentration_row_sum_delta(&self) -> f64 {
        self.solutions
            .iter()
            .map(FactorPair::max_c_row_sum_deviation)
            .fold(0.0, f64::max)
    }
}

/// Mean with 2.5% / 97.5% quantiles, elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Band<A> {
    pub mean: A,
    pub q025: A,
    pub q975: A,
}

/// Ensemble estimates per day and source.
#[derive(Debug, Clone)]
pub struct EnsembleEstimates {
    /// Concentrations ĉ_ik, n×K.
    pub concentration: Band<Array2<f64>>,
    /// Source energies ê_ik = ĉ_ik e_i in MWh, n×K.
    pub energy: Band<Array2<f64>>,
    /// Hourly source loads L̂_ik = ĉ_ik e_i S_k, n×K×p.
    pub load: Band<Array3<f64>>,
}

fn band_over<D: ndarray::Dimension + Copy>(
    shape: D,
    n_solutions: usize,
    value: impl Fn(usize, D::Pattern) -> f64,
) -> Band<ndarray::Array<f64, D>>
where
    D::Pattern: Copy,
{
    let mut mean = ndarray::Array::zeros(shape);
    let mut q025 = ndarray::Array::zeros(shape);
    let mut q975 = ndarray::Array::zeros(shape);
    let mut buf = vec![0.0; n_solutions];
    ndarray::Zip::indexed(&mut mean)
        .and(&mut q025)
        .and(&mut q975)
        .for_each(|idx, m, lo, hi| {
            for (l, b) in buf.iter_mut().enumerate() {
                *b = value(l, idx);
            }
            (*m, *lo, *hi) = mean_and_band(&mut buf);
        });
    Band { mean, q025, q975 }
}

pub fn ensemble_estimates(solutions: &[FactorPair], energy: ArrayView1<f64>) -> Result<EnsembleEstimates> {
    let first = solutions.first().ok_or(Error::EmptyCluster)?;
    let (n, k) = first.c.dim();
    let p = first.s.ncols();
    if energy.len() != n {
        return Err(Error::DimensionMismatch(format!("{} energies for {n} days", energy.len())));
    }
    let nl = solutions.len();
    let concentration = band_over(ndarray::Dim([n, k]), nl, |l, (i, j)| solutions[l].c[[i, j]]);
    let energy_band = band_over(ndarray::Dim([n, k]), nl, |l, (i, j)| solutions[l].c[[i, j]] * energy[i]);
    let load = band_over(ndarray::Dim([n, k, p]), nl, |l, (i, j, h)| {
        solutions[l].c[[i, j]] * energy[i] * solutions[l].s[[j, h]]
    });
    Ok(EnsembleEstimates {
        concentration,
        energy: energy_band,
        load,
    })
}

/// Disaggregated hourly load of one sector, concatenated over days.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSeries {
    pub sector: usize,
    /// n·p values in MW, day-major.
    pub hourly: Band<Vec<f64>>,
    /// MWh per day.
    pub daily_energy: Band<Vec<f64>>,
}

/// Sector loads: sources are summed within each solution, then the mean and
/// quantiles are taken across solutions.
pub fn sector_series(
    solutions: &[FactorPair],
    energy: ArrayView1<f64>,
    a: ArrayView2<f64>,
) -> Result<Vec<SectorSeries>> {
    let first = solutions.first().ok_or(Error::EmptyCluster)?;
    let (n, k) = first.c.dim();
    let p = first.s.ncols();
    if energy.len() != n || a.nrows() != k {
        return Err(Error::DimensionMismatch("sector_series inputs do not conform".into()));
    }
    let g = a.ncols();
    // per solution: n×g daily energies and (n·p)×g hourly loads
    let per_solution: Vec<(Array2<f64>, Array2<f64>)> = solutions
        .iter()
        .map(|sol| {
            let weighted = &sol.c * &energy.insert_axis(ndarray::Axis(1)); // n×K, MWh
            let daily = weighted.dot(&a);
            let mut hourly = Array2::zeros((n * p, g));
            for i in 0..n {
                for src in 0..k {
                    let w = weighted[[i, src]];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..g {
                        if a[[src, j]] == 0.0 {
                            continue;
                        }
                        for h in 0..p {
                            hourly[[i * p + h, j]] += a[[src, j]] * w * sol.s[[src, h]];
                        }
                    }
                }
            }
            (daily, hourly)
        })
        .collect();
    let nl = solutions.len();
    Ok((0..g)
        .map(|j| {
            let hourly = band_over(ndarray::Dim([n * p]), nl, |l, t| per_solution[l].1[[t, j]]);
            let daily = band_over(ndarray::Dim([n]), nl, |l, i| per_solution[l].0[[i, j]]);
            SectorSeries {
                sector: j,
                hourly: Band {
                    mean: hourly.mean.to_vec(),
                    q025: hourly.q025.to_vec(),
                    q975: hourly.q975.to_vec(),
                },
                daily_energy: Band {
                    mean: daily.mean.to_vec(),
                    q025: daily.q025.to_vec(),
                    q975: daily.q975.to_vec(),
                },
            }
        })
        .collect())
}

/// Average normalized sector profile for one (day type, season) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub day_type: DayType,
    pub season: Season,
    pub sector: usize,
    pub days: usize,
    pub profile: Vec<f64>,
}

/// Two-stage profile averaging: within each solution over the days of a
/// cell, then across solutions.
///
/// A day's sector profile is `Σ_{k∈sector} c_ik S_k` normalized to unit sum;
/// days where the sector has zero weight are skipped.
pub fn profile_report(
    solutions: &[FactorPair],
    calendar: &[DayLabel],
    a: ArrayView2<f64>,
) -> Result<Vec<ProfileRow>> {
    let first = solutions.first().ok_or(Error::EmptyCluster)?;
    let (n, _) = first.c.dim();
    let p = first.s.ncols();
    if calendar.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} days", calendar.len())));
    }
    let g = a.ncols();
    let mut rows = Vec::new();
    for day_type in DayType::ALL {
        for season in Season::ALL {
            let days: Vec<usize> = (0..n)
                .filter(|&i| calendar[i].day_type == day_type && calendar[i].season == season)
                .collect();
            if days.is_empty() {
                continue;
            }
            for j in 0..g {
                let mut across = vec![0.0; p];
                let mut contributing = 0usize;
                for sol in solutions {
                    let mut within = vec![0.0; p];
                    let mut used = 0usize;
                    for &i in &days {
                        let shape: Vec<f64> = (0..p)
                            .map(|h| {
                                (0..sol.c.ncols())
                                    .map(|src| a[[src, j]] * sol.c[[i, src]] * sol.s[[src, h]])
                                    .sum()
                            })
                            .collect();
                        let total: f64 = shape.iter().sum();
                        if total > 0.0 {
                            for (w, v) in within.iter_mut().zip(&shape) {
                                *w += v / total;
                            }
                            used += 1;
                        }
                    }
                    if used > 0 {
                        for (acc, w) in across.iter_mut().zip(&within) {
                            *acc += w / used as f64;
                        }
                        contributing += 1;
                    }
                }
                if contributing > 0 {
                    across.iter_mut().for_each(|v| *v /= contributing as f64);
                    rows.push(ProfileRow {
                        day_type,
                        season,
                        sector: j,
                        days: days.len(),
                        profile: across,
                    });
                }
            }
        }
    }
    Ok(rows)
}
