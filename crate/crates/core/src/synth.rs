//! Synthetic load with known sector decomposition.
//!
//! Daily shapes are generated as `X = C S + ε`: stylized source profiles
//! (trimodal industry with an early ramp, evening-peaked households, a
//! business-hours plateau for services), concentrations driven by day type
//! and sector-specific seasonality, and optional multiplicative noise applied
//! before renormalization. Annual totals and monthly indicators are derived
//! exactly from the planted factors, so the planted pair is a zero-loss
//! solution of the noiseless problem.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calendar::{DayType, HolidayCalendar, YearMonth};
use crate::constraints::{
    build_b, AnnualConsumption, AnnualTable, ConstraintSet, IndicatorTable, MonthlyIndicator, SectorMap,
};
use crate::curves::CurveMatrix;
use crate::ensemble::SectorSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub start: NaiveDate,
    pub n_days: usize,
    pub samples_per_day: usize,
    /// Set in code; configuration files take the mapping from the model section.
    #[serde(skip)]
    pub sectors: SectorMap,
    /// Relative standard deviation of the multiplicative shape noise.
    pub noise_level: f64,
    /// Relative standard deviation of the day-to-day concentration jitter.
    pub concentration_jitter: f64,
    /// Mean daily energy in MWh.
    pub base_daily_energy: f64,
    /// Amplitude of each sector's annual cycle in concentration.
    pub seasonal_amplitude: f64,
    /// Year-over-year change of every sector's annual cycle, as a fraction
    /// (phase shift in years and relative amplitude change).
    pub yearly_drift: f64,
    /// Relative noise on the published monthly indicators.
    pub indicator_noise: f64,
    pub holidays: Vec<NaiveDate>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            start: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            n_days: 365,
            samples_per_day: 24,
            sectors: SectorMap::one_to_one(&["household", "industry", "services"]),
            noise_level: 0.0,
            concentration_jitter: 0.05,
            base_daily_energy: 800_000.0,
            seasonal_amplitude: 0.3,
            yearly_drift: 0.0,
            indicator_noise: 0.0,
            holidays: Vec::new(),
            seed: 0,
        }
    }
}

/// The planted decomposition behind a synthetic dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// K×p, rows on the simplex.
    pub s_true: Array2<f64>,
    /// n×K, rows on the simplex.
    pub c_true: Array2<f64>,
    pub energy: Array1<f64>,
    pub sectors: SectorMap,
    pub noise_level: f64,
    /// Exact monthly sector consumption `B C A`, m×g.
    pub monthly: Array2<f64>,
    pub months: Vec<YearMonth>,
}

impl GroundTruth {
    pub fn a(&self) -> Array2<f64> {
        self.sectors.build_a(self.s_true.nrows()).expect("valid synthetic mapping")
    }

    /// (n·p)×g hourly sector loads in MW, day-major.
    pub fn sector_hourly(&self) -> Array2<f64> {
        let (n, k) = self.c_true.dim();
        let p = self.s_true.ncols();
        let a = self.a();
        let mut out = Array2::zeros((n * p, a.ncols()));
        for i in 0..n {
            for src in 0..k {
                let j = a.row(src).iter().position(|&v| v != 0.0).unwrap();
                let w = self.c_true[[i, src]] * self.energy[i];
                for h in 0..p {
                    out[[i * p + h, j]] += w * self.s_true[[src, h]];
                }
            }
        }
        out
    }

    /// n×g daily sector energies in MWh.
    pub fn sector_daily_energy(&self) -> Array2<f64> {
        (&self.c_true * &self.energy.view().insert_axis(ndarray::Axis(1))).dot(&self.a())
    }

    /// The true monthly constraint for the given curve matrix, with the source
    /// row-sum constraint.
    pub fn constraints(&self, curves: &CurveMatrix) -> Result<ConstraintSet> {
        let (b, _) = build_b(curves.energy.view(), &curves.calendar)?;
        Ok(ConstraintSet::with_row_sum(
            b,
            self.a(),
            self.monthly.clone(),
            self.s_true.ncols(),
        ))
    }
}

/// Profile family of a sector, chosen by name with a positional fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Family {
    Household,
    Industry,
    Services,
}

fn family(name: &str, index: usize) -> Family {
    let n = name.to_ascii_lowercase();
    if n.starts_with("house") || n.starts_with("dom") || n.starts_with("resid") {
        Family::Household
    } else if n.starts_with("indus") || n.starts_with("agri") {
        Family::Industry
    } else if n.starts_with("serv") || n.starts_with("comm") || n.starts_with("tert") {
        Family::Services
    } else {
        [Family::Household, Family::Industry, Family::Services][index % 3]
    }
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((h - centre) / width).powi(2)).exp()
}

fn ramp(h: f64, at: f64, steep: f64) -> f64 {
    1.0 / (1.0 + (-(h - at) * steep).exp())
}

/// Stylized profile of source `variant` of a sector family.
fn profile(family: Family, variant: usize, p: usize) -> Vec<f64> {
    let shift = variant as f64;
    let raw: Vec<f64> = (0..p)
        .map(|hh| {
            let h = hh as f64 + 0.5;
            match family {
                Family::Industry => {
                    0.35 + 0.8 * ramp(h, 5.0 + shift, 2.5) * (1.0 - 0.6 * ramp(h, 21.5, 1.5))
                        + 0.35 * bump(h, 9.0, 1.2)
                        + 0.25 * bump(h, 16.0, 1.2)
                        + 0.2 * bump(h, 20.0, 1.0)
                }
                Family::Household => {
                    0.3 + 0.5 * ramp(h, 5.5 + 2.5 * shift, 1.2 / (1.0 + shift)) * (1.0 - 0.7 * ramp(h, 23.0, 2.0))
                        + 0.25 * bump(h, 10.5, 1.5)
                        + 0.9 * bump(h, 18.5 + 2.5 * shift, 1.6)
                }
                Family::Services => {
                    let plateau = ramp(h, 6.0 + shift, 1.5) * (1.0 - ramp(h, 20.5 - shift, 1.2));
                    0.3 + 0.9 * plateau + 0.2 * bump(h, 17.5 + 0.5 * shift, 1.5)
                        - 0.15 * shift * bump(h, 15.0, 1.5)
                }
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v.max(0.0) / total).collect()
}

/// Relative activity of a sector on a day type.
fn day_type_factor(family: Family, day_type: DayType) -> f64 {
    match (family, day_type) {
        (Family::Industry, DayType::WorkingDay) => 1.3,
        (Family::Industry, DayType::Monday) => 1.15,
        (Family::Industry, DayType::Saturday) => 0.8,
        (Family::Industry, DayType::Holiday) => 0.5,
        (Family::Services, DayType::WorkingDay | DayType::Monday) => 1.1,
        (Family::Services, DayType::Saturday) => 0.9,
        (Family::Services, DayType::Holiday) => 0.7,
        (Family::Household, DayType::WorkingDay | DayType::Monday) => 0.9,
        (Family::Household, DayType::Saturday) => 1.1,
        (Family::Household, DayType::Holiday) => 1.4,
    }
}

/// Phase (fraction of a year) of the concentration peak of each family.
fn seasonal_phase(family: Family) -> f64 {
    match family {
        Family::Household => 0.0,
        Family::Industry => 0.35,
        Family::Services => 0.6,
    }
}

fn total_energy_factor(date: NaiveDate, day_type: DayType) -> f64 {
    let t = f64::from(date.ordinal0()) / 365.0;
    let weekly = match day_type {
        DayType::WorkingDay => 1.0,
        DayType::Monday => 0.97,
        DayType::Saturday => 0.86,
        DayType::Holiday => 0.75,
    };
    weekly * (1.0 + 0.12 * (TAU * t).cos() + 0.08 * (2.0 * TAU * (t - 0.55)).cos())
}

/// Generates a dataset and its ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(CurveMatrix, AnnualTable, IndicatorTable, GroundTruth)> {
    let p = spec.samples_per_day;
    let k = spec.sectors.n_sources();
    let g = spec.sectors.n_sectors();
    if p < 2 || k == 0 || g == 0 {
        return Err(Error::InvalidSpec(format!("need p ≥ 2 and at least one source, got p = {p}, K = {k}")));
    }
    let owner = spec
        .sectors
        .sector_of(k)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    if !(spec.noise_level >= 0.0) || !(spec.concentration_jitter >= 0.0) || !(spec.indicator_noise >= 0.0) {
        return Err(Error::InvalidSpec("noise levels must be non-negative".into()));
    }
    if !(spec.base_daily_energy > 0.0) {
        return Err(Error::InvalidSpec("base daily energy must be positive".into()));
    }
    let end = spec.start + Duration::days(spec.n_days as i64 - 1);
    if spec.n_days == 0 || YearMonth::of(spec.start) == YearMonth::of(end) {
        return Err(Error::InvalidSpec("the synthetic period must span at least two months".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let holidays = HolidayCalendar::new(spec.holidays.iter().copied());
    let families: Vec<Family> = spec
        .sectors
        .names
        .iter()
        .enumerate()
        .map(|(j, n)| family(n, j))
        .collect();

    // sources
    let mut variant = vec![0usize; k];
    for list in &spec.sectors.sources {
        for (r, &src) in list.iter().enumerate() {
            variant[src] = r;
        }
    }
    let mut s_true = Array2::zeros((k, p));
    for src in 0..k {
        let prof = profile(families[owner[src]], variant[src], p);
        s_true.row_mut(src).assign(&Array1::from(prof));
    }

    // concentrations and energies
    let n = spec.n_days;
    let mut c_true = Array2::zeros((n, k));
    let mut energy = Array1::zeros(n);
    let mut calendar = Vec::with_capacity(n);
    let first_year = spec.start.year();
    for i in 0..n {
        let date = spec.start + Duration::days(i as i64);
        let label = holidays.label(date);
        let t = f64::from(date.ordinal0()) / 365.0;
        let years = f64::from(date.year() - first_year);
        for src in 0..k {
            let fam = families[owner[src]];
            let phase = seasonal_phase(fam) + spec.yearly_drift * years;
            let amp = spec.seasonal_amplitude * (1.0 + spec.yearly_drift).powf(years);
            let seasonal = 1.0 + amp * (TAU * (t - phase)).cos();
            // sources sharing a sector alternate between a cold and a warm regime
            let regime = if spec.sectors.sources[owner[src]].len() > 1 {
                1.0 + 0.6 * (TAU * (t - 0.5 * variant[src] as f64)).cos()
            } else {
                1.0
            };
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let jitter = (spec.concentration_jitter * jitter).exp();
            c_true[[i, src]] = (day_type_factor(fam, label.day_type) * seasonal * regime * jitter).max(1e-6);
        }
        let total = c_true.row(i).sum();
        c_true.row_mut(i).mapv_inplace(|v| v / total);
        let e_noise: f64 = rng.random_range(-0.01..0.01);
        energy[i] = spec.base_daily_energy * total_energy_factor(date, label.day_type) * (1.0 + e_noise);
        calendar.push(label);
    }

    let clean = c_true.dot(&s_true);
    let mut x = clean.clone();
    if spec.noise_level > 0.0 {
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v * (1.0 + spec.noise_level * z)).max(0.0);
        }
        for mut row in x.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
    }

    let curves = CurveMatrix { x, energy: energy.clone(), calendar };
    let a = spec.sectors.build_a(k)?;
    let (b, months) = build_b(energy.view(), &curves.calendar)?;
    let monthly = b.dot(&c_true).dot(&a);

    let mut asc_rows = Vec::new();
    let daily_sector = (&c_true * &energy.view().insert_axis(ndarray::Axis(1))).dot(&a);
    for year in curves.years() {
        for (j, name) in spec.sectors.names.iter().enumerate() {
            let total: f64 = (0..n)
                .filter(|&i| curves.calendar[i].date.year() == year)
                .map(|i| daily_sector[[i, j]])
                .sum();
            asc_rows.push(AnnualConsumption {
                sector: name.clone(),
                year,
                consumption_mwh: total,
            });
        }
    }

    let mut msi_rows = Vec::new();
    for (j, name) in spec.sectors.names.iter().enumerate() {
        let mean = monthly.column(j).mean().unwrap();
        for (r, &month) in months.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let value = (100.0 * monthly[[r, j]] / mean * (1.0 + spec.indicator_noise * z)).max(0.0);
            msi_rows.push(MonthlyIndicator {
                sector: name.clone(),
                month,
                value,
            });
        }
    }

    let truth = GroundTruth {
        s_true,
        c_true,
        energy,
        sectors: spec.sectors.clone(),
        noise_level: spec.noise_level,
        monthly,
        months,
    };
    Ok((curves, AnnualTable { rows: asc_rows }, IndicatorTable { rows: msi_rows }, truth))
}

/// Writes `load.csv`, `asc.csv`, `msi.csv`, `holidays.txt` and the planted
/// factors (`truth_S.csv`, `truth_C.csv`) to `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &SynthSpec,
    curves: &CurveMatrix,
    asc: &AnnualTable,
    msi: &IndicatorTable,
    truth: &GroundTruth,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_load_csv(&dir.join("load.csv"), curves)?;

    crate::io::write_rows(&dir.join("asc.csv"), &asc.rows)?;
    crate::io::write_rows(&dir.join("msi.csv"), &msi.rows)?;

    let path = dir.join("holidays.txt");
    let text: String = spec.holidays.iter().map(|d| format!("{d}\n")).collect();
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    crate::io::write_matrix(&dir.join("truth_S.csv"), truth.s_true.view(), None, None)?;
    crate::io::write_matrix(&dir.join("truth_C.csv"), truth.c_true.view(), None, None)?;
    Ok(())
}

/// Writes hourly loads `x_ih · e_i` in the `timestamp,load_mw` schema.
pub fn write_load_csv(path: &Path, curves: &CurveMatrix) -> Result<()> {
    if curves.samples() != 24 {
        return Err(Error::InvalidSpec("load files are written with 24 hourly samples only".into()));
    }
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "timestamp,load_mw").map_err(io)?;
    for (i, label) in curves.calendar.iter().enumerate() {
        for h in 0..24 {
            let mw = curves.x[[i, h]] * curves.energy[i];
            writeln!(w, "{}T{:02}:00:00+01:00,{}", label.date, h, mw).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Recovery metrics of one sector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    pub sector: String,
    /// Root-mean-square error of the hourly mean load, MW.
    pub hourly_rmse_mw: f64,
    /// Mean absolute percentage error of daily energies, in percent.
    pub daily_energy_mape: f64,
    /// Cosine similarity of the average daily profiles.
    pub profile_cosine: f64,
}

/// Compares estimated sector series with the planted truth.
pub fn evaluate_recovery(estimated: &[SectorSeries], truth: &GroundTruth) -> Result<Vec<RecoveryMetrics>> {
    let hourly = truth.sector_hourly();
    let daily = truth.sector_daily_energy();
    let (n, g) = daily.dim();
    let p = truth.s_true.ncols();
    if estimated.len() != g {
        return Err(Error::ShapeMismatch(format!("{} estimated sectors, truth has {g}", estimated.len())));
    }
    estimated
        .iter()
        .enumerate()
        .map(|(j, est)| {
            if est.hourly.mean.len() != n * p || est.daily_energy.mean.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "sector {j}: {} hourly and {} daily values, expected {} and {n}",
                    est.hourly.mean.len(),
                    est.daily_energy.mean.len(),
                    n * p
                )));
            }
            let se: f64 = est
                .hourly
                .mean
                .iter()
                .zip(hourly.column(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let mape = est
                .daily_energy
                .mean
                .iter()
                .zip(daily.column(j))
                .map(|(a, b)| ((a - b) / b).abs())
                .sum::<f64>()
                / n as f64
                * 100.0;
            let avg = |series: &mut dyn Iterator<Item = f64>| -> Vec<f64> {
                let mut prof = vec![0.0; p];
                for (t, v) in series.enumerate() {
                    prof[t % p] += v;
                }
                prof
            };
            let pe = avg(&mut est.hourly.mean.iter().copied());
            let pt = avg(&mut hourly.column(j).iter().copied());
            let dot: f64 = pe.iter().zip(&pt).map(|(a, b)| a * b).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok(RecoveryMetrics {
                sector: truth.sectors.names[j].clone(),
                hourly_rmse_mw: (se / (n * p) as f64).sqrt(),
                daily_energy_mape: mape,
                profile_cosine: dot / (norm(&pe) * norm(&pt)),
            })
        })
        .collect()
}
