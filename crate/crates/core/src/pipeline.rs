//! Config-driven pipeline: the commands behind the `lcnmf` binary.
//!
//! Every command reads the run configuration, reads the artifacts of earlier
//! commands from the output directory and writes its own. Re-running a
//! command with the same configuration rewrites identical CSV files; only the
//! timings in `manifest/<command>.json` change.
//!
//! ```text
//! <out>/prepare/   curves.csv days.csv B.csv A.csv Y.csv validation.json
//! <out>/rank/      scree.csv scree.svg rank.json
//! <out>/solutions/<seed>/C.csv S.csv
//! <out>/ensemble/  losses.csv summary.json medoid_S.csv sector_hourly.csv
//!                  sector_daily.csv profiles.csv
//! <out>/nowcast/   monthly_sectors.csv daily_residuals.csv correlations.csv
//! <out>/report/    sources.svg losses.svg weekly.svg summary.txt
//! <out>/synth/     load.csv load_test.csv asc.csv msi.csv holidays.txt config.toml
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{Datelike, Duration, NaiveDate};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calendar::{DayLabel, DayType, HolidayCalendar, Season, YearMonth};
use crate::constraints::{build_b, build_y, AnnualTable, ConstraintSet, IndicatorTable, SectorMap};
use crate::curves::{adjust_losses, build_curves, ingest_load, CurveMatrix, GapPolicy, LossMode, RecordFlag, SamplesPerDay};
use crate::ensemble::{profile_report, run_ensemble, sector_series, ClusterMode, SectorSeries, SolutionEnsemble};
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix, write_rows};
use crate::nowcast::{monthly_consumption, project_ensemble, score, ProjectionConfig};
use crate::rank::{scree, DEFAULT_THRESHOLD};
use crate::report;
use crate::solver::{loss, FactorPair, LossTerms, SolverConfig};
use crate::synth::{generate, write_load_csv, SynthSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Number of sources: a fixed value or `"auto"` (from the scree threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KChoice {
    Fixed(usize),
    Auto(AutoK),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoK {
    Auto,
}

impl Default for KChoice {
    fn default() -> Self {
        KChoice::Auto(AutoK::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub load: PathBuf,
    pub asc: PathBuf,
    pub msi: PathBuf,
    #[serde(default)]
    pub holidays: Option<PathBuf>,
    #[serde(default)]
    pub gap_policy: GapPolicy,
    /// 24 or 25.
    #[serde(default = "default_samples")]
    pub samples_per_day: usize,
    #[serde(default)]
    pub loss_mode: LossMode,
    /// First day used for training, `"YYYY-MM-DD"`.
    #[serde(default)]
    pub start: Option<NaiveDate>,
    /// Last day used for training.
    #[serde(default)]
    pub end: Option<NaiveDate>,
}

fn default_samples() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: KChoice,
    pub scree_threshold: f64,
    /// `sector = [1-based source indices]`, in output order.
    pub sectors: toml::Table,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: KChoice::default(),
            scree_threshold: DEFAULT_THRESHOLD,
            sectors: toml::Table::new(),
        }
    }
}

impl ModelConfig {
    /// The configured mapping, converted to 0-based source indices.
    pub fn sector_map(&self) -> Result<Option<SectorMap>> {
        if self.sectors.is_empty() {
            return Ok(None);
        }
        let mut names = Vec::new();
        let mut sources = Vec::new();
        for (name, value) in &self.sectors {
            let list = value
                .as_array()
                .ok_or_else(|| Error::Config(format!("model.sectors.{name} must be a list of source indices")))?;
            let idx = list
                .iter()
                .map(|v| match v.as_integer() {
                    Some(i) if i >= 1 => Ok(i as usize - 1),
                    _ => Err(Error::Config(format!(
                        "model.sectors.{name}: source indices start at 1, got {v}"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            names.push(name.clone());
            sources.push(idx);
        }
        Ok(Some(SectorMap::new(names, sources)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub runs: usize,
    pub cluster: ClusterMode,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            runs: 1000,
            cluster: ClusterMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NowcastConfig {
    /// Load curves to disaggregate with the fitted sources.
    pub load: PathBuf,
    /// Indicators covering the new months and the year before; enables scoring.
    #[serde(default)]
    pub msi: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub spec: SynthSpec,
    /// Trailing days written to `load_test.csv` instead of `load.csv`.
    pub holdout_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub nowcast: Option<NowcastConfig>,
    #[serde(default)]
    pub synth: SynthConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: default_out(),
            threads: None,
            data: None,
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            ensemble: EnsembleConfig::default(),
            projection: ProjectionConfig::default(),
            nowcast: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML configuration; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out);
        if let Some(d) = &mut cfg.data {
            resolve(&mut d.load);
            resolve(&mut d.asc);
            resolve(&mut d.msi);
            if let Some(h) = &mut d.holidays {
                resolve(h);
            }
        }
        if let Some(n) = &mut cfg.nowcast {
            resolve(&mut n.load);
            if let Some(m) = &mut n.msi {
                resolve(m);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// SHA-256 of the effective configuration (after overrides), hex encoded.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("the [data] section is required for this command".into()))
    }

    fn sectors(&self) -> Result<SectorMap> {
        self.model
            .sector_map()?
            .ok_or_else(|| Error::Config("model.sectors must map every sector to its sources".into()))
    }

    fn samples(&self) -> Result<SamplesPerDay> {
        match self.data()?.samples_per_day {
            24 => Ok(SamplesPerDay::Hourly24),
            25 => Ok(SamplesPerDay::Instants25),
            other => Err(Error::Config(format!("samples_per_day must be 24 or 25, got {other}"))),
        }
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.ensemble.runs == 0 {
            return Err(Error::Config("ensemble.runs must be at least 1".into()));
        }
        if !(self.model.scree_threshold > 0.0 && self.model.scree_threshold < 1.0) {
            return Err(Error::Config("model.scree_threshold must lie in (0, 1)".into()));
        }
        if let ClusterMode::Threshold(t) = self.ensemble.cluster {
            if !t.is_finite() {
                return Err(Error::Config("cluster threshold must be finite".into()));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(map) = self.model.sector_map()? {
            if let KChoice::Fixed(k) = self.model.k {
                if k < map.n_sectors() {
                    return Err(Error::Config(format!("K = {k} is smaller than the {} sectors", map.n_sectors())));
                }
                map.build_a(k)?;
            }
        }
        let mut files: Vec<&Path> = Vec::new();
        if let Some(d) = &self.data {
            self.samples()?;
            files.extend([d.load.as_path(), d.asc.as_path(), d.msi.as_path()]);
            files.extend(d.holidays.as_deref());
            if let (Some(s), Some(e)) = (d.start, d.end) {
                if e < s {
                    return Err(Error::Config(format!("data.end {e} precedes data.start {s}")));
                }
            }
        }
        if let Some(n) = &self.nowcast {
            files.push(&n.load);
            files.extend(n.msi.as_deref());
        }
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("input file not found: {}", f.display())));
            }
        }
        Ok(())
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }
}

/// Messages for the user that are not errors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub notices: Vec<String>,
}

struct Manifest<'a> {
    command: &'a str,
    cfg: &'a RunConfig,
    started: Instant,
    timings: Vec<(String, f64)>,
    last: Instant,
}

impl<'a> Manifest<'a> {
    fn new(command: &'a str, cfg: &'a RunConfig) -> Self {
        let now = Instant::now();
        Manifest {
            command,
            cfg,
            started: now,
            timings: Vec::new(),
            last: now,
        }
    }

    fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn write(self, details: serde_json::Value) -> Result<()> {
        let timings: serde_json::Map<String, serde_json::Value> = self
            .timings
            .into_iter()
            .map(|(k, v)| (k, serde_json::json!(v)))
            .collect();
        let unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let body = serde_json::json!({
            "command": self.command,
            "version": VERSION,
            "config_sha256": self.cfg.hash(),
            "seed": self.cfg.seed,
            "threads": rayon::current_num_threads(),
            "finished_unix": unix,
            "elapsed_seconds": self.started.elapsed().as_secs_f64(),
            "timings_seconds": timings,
            "details": details,
            "config": toml::to_string(self.cfg).expect("configuration serializes"),
        });
        let path = self.cfg.dir("manifest").join(format!("{}.json", self.command));
        write_text(&path, &(serde_json::to_string_pretty(&body).expect("manifest serializes") + "\n"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::Config(format!("{} not found; run `{hint}` first", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedRow {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn source_labels(map: &SectorMap, k: usize) -> Vec<String> {
    let mut labels = vec![String::new(); k];
    for (name, list) in map.names.iter().zip(&map.sources) {
        for (r, &src) in list.iter().enumerate() {
            if src < k {
                labels[src] = if list.len() == 1 {
                    name.clone()
                } else {
                    format!("{name}_{}", r + 1)
                };
            }
        }
    }
    labels
}

fn hour_labels(p: usize) -> Vec<String> {
    (0..p).map(|h| format!("h{h:02}")).collect()
}

fn timestamp(date: NaiveDate, h: usize) -> String {
    let day = date + Duration::days((h / 24) as i64);
    format!("{}T{:02}:00:00", day, h % 24)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DayRow {
    date: NaiveDate,
    energy_mwh: f64,
    day_type: DayType,
    season: Season,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Validation {
    days: usize,
    first_day: NaiveDate,
    last_day: NaiveDate,
    months: usize,
    years: Vec<i32>,
    samples_per_day: usize,
    interpolated_hours: usize,
    averaged_hours: usize,
    dst_days: Vec<NaiveDate>,
    total_energy_mwh: f64,
    annual_consumption_mwh: f64,
    /// Ratio of load energy to annual sector consumption (network losses and
    /// coverage differences).
    energy_to_consumption: f64,
    k: usize,
    sectors: Vec<String>,
    sources: Vec<String>,
}

/// Artifacts of `prepare`, as read back by later commands.
pub struct Prepared {
    pub curves: CurveMatrix,
    pub months: Vec<YearMonth>,
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub y: Array2<f64>,
    pub sectors: SectorMap,
    pub sources: Vec<String>,
}

impl Prepared {
    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn constraints(&self) -> ConstraintSet {
        ConstraintSet::with_row_sum(self.b.clone(), self.a.clone(), self.y.clone(), self.curves.samples())
    }
}

fn load_curves(path: &Path, cfg: &RunConfig, window: bool) -> Result<(CurveMatrix, usize, usize, Vec<NaiveDate>)> {
    let data = cfg.data()?;
    let mut records = ingest_load(path, data.gap_policy)?;
    if window {
        records.retain(|r| data.start.is_none_or(|s| r.date() >= s) && data.end.is_none_or(|e| r.date() <= e));
    }
    let interpolated = records.iter().filter(|r| r.flag == RecordFlag::Interpolated).count();
    let averaged = records.iter().filter(|r| r.flag == RecordFlag::Averaged).count();
    let dst = crate::curves::dst_days(&records);
    let holidays = match &data.holidays {
        Some(h) => HolidayCalendar::load(h)?,
        None => HolidayCalendar::default(),
    };
    let curves = build_curves(&records, &holidays, cfg.samples()?)?;
    Ok((curves, interpolated, averaged, dst))
}

/// Reads the inputs, builds curves and constraint matrices and writes them
/// to `<out>/prepare`.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut manifest = Manifest::new("prepare", cfg);
    let data = cfg.data()?;
    let sectors = cfg.sectors()?;
    let (curves, interpolated, averaged, dst_days) = load_curves(&data.load, cfg, true)?;
    if curves.n_days() == 0 {
        return Err(Error::DegenerateData("no complete days in the training window".into()));
    }
    manifest.phase("curves");

    let asc = AnnualTable::load(&data.asc)?;
    let msi = IndicatorTable::load(&data.msi)?;
    let years = curves.years();
    let raw = asc.sector_totals(&sectors.names, &years)?;
    let w = adjust_losses(curves.total_energy(), &raw, data.loss_mode)?;
    let (b, months) = build_b(curves.energy.view(), &curves.calendar)?;
    let indicators = msi.matrix(&sectors.names, &months)?;
    let y = build_y(&indicators, &w, &curves.monthly_totals())?;

    let mut notices = Vec::new();
    let k = match cfg.model.k {
        KChoice::Fixed(k) => k,
        KChoice::Auto(_) => {
            let s = scree(curves.x.view(), cfg.model.scree_threshold)?;
            notices.push(format!("scree threshold {} suggests K = {}", cfg.model.scree_threshold, s.suggested_k));
            s.suggested_k
        }
    };
    if sectors.n_sources() != k {
        return Err(Error::Config(format!(
            "the sector mapping assigns {} sources but K = {k}",
            sectors.n_sources()
        )));
    }
    let a = sectors.build_a(k)?;
    manifest.phase("constraints");

    let dir = cfg.dir("prepare");
    let dates: Vec<String> = curves.calendar.iter().map(|l| l.date.to_string()).collect();
    let month_labels: Vec<String> = months.iter().map(ToString::to_string).collect();
    let sources = source_labels(&sectors, k);
    write_matrix(&dir.join("curves.csv"), curves.x.view(), Some(&dates), Some(&hour_labels(curves.samples())))?;
    write_rows(
        &dir.join("days.csv"),
        curves.calendar.iter().zip(curves.energy.iter()).map(|(l, &e)| DayRow {
            date: l.date,
            energy_mwh: e,
            day_type: l.day_type,
            season: l.season,
        }),
    )?;
    write_matrix(&dir.join("B.csv"), b.view(), Some(&month_labels), Some(&dates))?;
    write_matrix(&dir.join("A.csv"), a.view(), Some(&sources), Some(&sectors.names))?;
    write_matrix(&dir.join("Y.csv"), y.view(), Some(&month_labels), Some(&sectors.names))?;
    let validation = Validation {
        days: curves.n_days(),
        first_day: curves.calendar[0].date,
        last_day: curves.calendar[curves.n_days() - 1].date,
        months: months.len(),
        years,
        samples_per_day: curves.samples(),
        interpolated_hours: interpolated,
        averaged_hours: averaged,
        dst_days,
        total_energy_mwh: curves.total_energy(),
        annual_consumption_mwh: raw.iter().sum(),
        energy_to_consumption: curves.total_energy() / raw.iter().sum::<f64>(),
        k,
        sectors: sectors.names.clone(),
        sources,
    };
    write_json(&dir.join("validation.json"), &validation)?;
    manifest.phase("write");
    manifest.write(serde_json::to_value(&validation).expect("serializable"))?;
    Ok(Outcome { notices })
}

/// Reads the artifacts written by [`cmd_prepare`].
pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let dir = cfg.dir("prepare");
    let validation: Validation = read_json(&dir.join("validation.json"), "prepare")?;
    let x = read_matrix(&dir.join("curves.csv"))?;
    let days_path = dir.join("days.csv");
    let mut reader = csv::Reader::from_path(&days_path).map_err(|e| Error::csv(&days_path, e))?;
    let days: Vec<DayRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(&days_path, e))?;
    let b = read_matrix(&dir.join("B.csv"))?;
    let a = read_matrix(&dir.join("A.csv"))?;
    let y = read_matrix(&dir.join("Y.csv"))?;
    if days.len() != x.data.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} days listed for {} curves",
            days.len(),
            x.data.nrows()
        )));
    }
    let months = b
        .meta
        .row_labels
        .clone()
        .unwrap_or_default()
        .iter()
        .map(|m| m.parse().map_err(|e: String| Error::ShapeMismatch(format!("B.csv month label: {e}"))))
        .collect::<Result<Vec<YearMonth>>>()?;
    let curves = CurveMatrix {
        x: x.data,
        energy: Array1::from_iter(days.iter().map(|d| d.energy_mwh)),
        calendar: days
            .iter()
            .map(|d| DayLabel {
                date: d.date,
                day_type: d.day_type,
                season: d.season,
            })
            .collect(),
    };
    let sectors = cfg.sectors()?;
    if sectors.names != validation.sectors {
        return Err(Error::Config(
            "the sector mapping changed since `prepare`; run it again".into(),
        ));
    }
    Ok(Prepared {
        curves,
        months,
        b: b.data,
        a: a.data,
        y: y.data,
        sectors,
        sources: validation.sources,
    })
}

#[derive(Debug, Clone, Serialize)]
struct ScreeRow {
    component: usize,
    ratio: f64,
    cumulative: f64,
}

/// Scree table and plot of the prepared curves.
pub fn cmd_rank(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut manifest = Manifest::new("rank", cfg);
    let prepared = load_prepared(cfg)?;
    let threshold = cfg.model.scree_threshold;
    let s = scree(prepared.curves.x.view(), threshold)?;
    manifest.phase("pca");
    let dir = cfg.dir("rank");
    write_rows(
        &dir.join("scree.csv"),
        s.explained_variance_ratio
            .iter()
            .zip(&s.cumulative)
            .enumerate()
            .map(|(i, (&ratio, &cumulative))| ScreeRow {
                component: i + 1,
                ratio,
                cumulative,
            }),
    )?;
    write_text(&dir.join("scree.svg"), &report::scree_chart(&s, threshold).to_svg())?;
    let details = serde_json::json!({
        "threshold": threshold,
        "suggested_d": s.suggested_d,
        "suggested_k": s.suggested_k,
    });
    write_json(&dir.join("rank.json"), &details)?;
    manifest.phase("write");
    manifest.write(details)?;
    Ok(Outcome {
        notices: vec![format!(
            "{} components reach {threshold}; suggested K = {}",
            s.suggested_d, s.suggested_k
        )],
    })
}

#[derive(Debug, Clone, Serialize)]
struct LossRow {
    seed: u64,
    status: &'static str,
    loss: Option<f64>,
    fit: Option<f64>,
    pen_c: Option<f64>,
    pen_s: Option<f64>,
    iters: Option<usize>,
    converged: Option<bool>,
    retained: bool,
}

/// What `fit` records about the retained cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub k: usize,
    pub sources: Vec<String>,
    pub runs: usize,
    pub failed: usize,
    pub cluster: ClusterMode,
    /// Largest retained loss.
    pub threshold: f64,
    pub retained: Vec<u64>,
    pub medoid_seed: u64,
    /// Per retained solution, `perm[new] = old` source index.
    pub alignment: Vec<Vec<usize>>,
    pub max_c_row_sum_deviation: f64,
    pub max_s_row_sum_deviation: f64,
    /// Largest `‖BCA − Y‖_F / ‖Y‖_F` over retained solutions.
    pub max_constraint_residual: f64,
    pub medoid_terms: LossTerms,
}

/// Runs the ensemble and writes losses, retained solutions and the summary.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut manifest = Manifest::new("fit", cfg);
    let prepared = load_prepared(cfg)?;
    let cons = prepared.constraints();
    let x = prepared.curves.x.view();
    let runs = run_ensemble(x, &cons, &cfg.solver, cfg.ensemble.runs, cfg.seed)?;
    manifest.phase("ensemble");
    let ens = SolutionEnsemble::from_runs(&runs, cfg.ensemble.cluster, prepared.a.view())?;
    manifest.phase("cluster");

    let y_norm = prepared.y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let max_constraint_residual = ens
        .terms
        .iter()
        .map(|t| t.pen_c.sqrt() / y_norm)
        .fold(0.0, f64::max);
    let summary = FitSummary {
        k: prepared.k(),
        sources: prepared.sources.clone(),
        runs: runs.len(),
        failed: ens.failed,
        cluster: cfg.ensemble.cluster,
        threshold: ens.threshold,
        retained: ens.seeds.clone(),
        medoid_seed: ens.seeds[ens.medoid],
        alignment: ens.alignment.clone(),
        max_c_row_sum_deviation: ens.concentration_row_sum_delta(),
        max_s_row_sum_deviation: ens
            .solutions
            .iter()
            .map(FactorPair::max_s_row_sum_deviation)
            .fold(0.0, f64::max),
        max_constraint_residual,
        medoid_terms: ens.terms[ens.medoid],
    };

    let retained: std::collections::BTreeSet<u64> = ens.seeds.iter().copied().collect();
    let rows = runs.iter().map(|r| match &r.result {
        Ok(res) => LossRow {
            seed: r.seed,
            status: "ok",
            loss: Some(res.terms.total),
            fit: Some(res.terms.fit),
            pen_c: Some(res.terms.pen_c),
            pen_s: Some(res.terms.pen_s),
            iters: Some(res.iters),
            converged: Some(res.converged),
            retained: retained.contains(&r.seed),
        },
        Err(_) => LossRow {
            seed: r.seed,
            status: "failed",
            loss: None,
            fit: None,
            pen_c: None,
            pen_s: None,
            iters: None,
            converged: None,
            retained: false,
        },
    });
    let ens_dir = cfg.dir("ensemble");
    write_rows(&ens_dir.join("losses.csv"), rows)?;
    let sol_dir = cfg.dir("solutions");
    if sol_dir.exists() {
        std::fs::remove_dir_all(&sol_dir).map_err(|e| Error::io(&sol_dir, e))?;
    }
    let dates: Vec<String> = prepared.curves.calendar.iter().map(|l| l.date.to_string()).collect();
    let hours = hour_labels(prepared.curves.samples());
    for (seed, sol) in ens.seeds.iter().zip(&ens.solutions) {
        let d = sol_dir.join(seed.to_string());
        write_matrix(&d.join("C.csv"), sol.c.view(), Some(&dates), Some(&prepared.sources))?;
        write_matrix(&d.join("S.csv"), sol.s.view(), Some(&prepared.sources), Some(&hours))?;
    }
    write_matrix(&ens_dir.join("medoid_S.csv"), ens.medoid_s().view(), Some(&prepared.sources), Some(&hours))?;
    write_json(&ens_dir.join("summary.json"), &summary)?;
    manifest.phase("write");

    let mut notices = vec![format!(
        "{} of {} runs retained (loss ≤ {:.6e}), {} failed",
        ens.solutions.len(),
        runs.len(),
        ens.threshold,
        ens.failed
    )];
    if runs.iter().any(|r| r.result.as_ref().is_ok_and(|res| !res.converged)) {
        notices.push("some runs stopped at max_iters before converging".into());
    }
    manifest.write(serde_json::to_value(&summary).expect("serializable"))?;
    Ok(Outcome { notices })
}

/// Retained, aligned solutions as written by [`cmd_fit`], in seed order.
pub fn load_solutions(cfg: &RunConfig) -> Result<(FitSummary, Vec<FactorPair>)> {
    let summary: FitSummary = read_json(&cfg.dir("ensemble").join("summary.json"), "fit")?;
    let solutions = summary
        .retained
        .iter()
        .map(|seed| {
            let d = cfg.dir("solutions").join(seed.to_string());
            Ok(FactorPair::new(
                read_matrix(&d.join("C.csv"))?.data,
                read_matrix(&d.join("S.csv"))?.data,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((summary, solutions))
}

#[derive(Debug, Clone, Serialize)]
struct HourlyRow<'a> {
    timestamp: String,
    sector: &'a str,
    mean_mw: f64,
    q025_mw: f64,
    q975_mw: f64,
}

#[derive(Debug, Clone, Serialize)]
struct DailyRow<'a> {
    date: NaiveDate,
    sector: &'a str,
    mean_mwh: f64,
    q025_mwh: f64,
    q975_mwh: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ProfileCsvRow<'a> {
    day_type: &'static str,
    season: &'static str,
    sector: &'a str,
    days: usize,
    hour: usize,
    share: f64,
}

fn sector_estimates(prepared: &Prepared, solutions: &[FactorPair]) -> Result<Vec<SectorSeries>> {
    sector_series(solutions, prepared.curves.energy.view(), prepared.a.view())
}

/// Hourly and daily sector series with bands, and day-type/season profiles.
pub fn cmd_disaggregate(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut manifest = Manifest::new("disaggregate", cfg);
    let prepared = load_prepared(cfg)?;
    let (_, solutions) = load_solutions(cfg)?;
    let series = sector_estimates(&prepared, &solutions)?;
    let profiles = profile_report(&solutions, &prepared.curves.calendar, prepared.a.view())?;
    manifest.phase("estimates");

    let names = &prepared.sectors.names;
    let p = prepared.curves.samples();
    let cal = &prepared.curves.calendar;
    let dir = cfg.dir("ensemble");
    let mut hourly = Vec::new();
    let mut daily = Vec::new();
    for (i, label) in cal.iter().enumerate() {
        for h in 0..p {
            for (j, s) in series.iter().enumerate() {
                let t = i * p + h;
                hourly.push(HourlyRow {
                    timestamp: timestamp(label.date, h),
                    sector: &names[j],
                    mean_mw: s.hourly.mean[t],
                    q025_mw: s.hourly.q025[t],
                    q975_mw: s.hourly.q975[t],
                });
            }
        }
        for (j, s) in series.iter().enumerate() {
            daily.push(DailyRow {
                date: label.date,
                sector: &names[j],
                mean_mwh: s.daily_energy.mean[i],
                q025_mwh: s.daily_energy.q025[i],
                q975_mwh: s.daily_energy.q975[i],
            });
        }
    }
    write_rows(&dir.join("sector_hourly.csv"), hourly)?;
    write_rows(&dir.join("sector_daily.csv"), daily)?;
    write_rows(
        &dir.join("profiles.csv"),
        profiles.iter().flat_map(|row| {
            row.profile.iter().enumerate().map(move |(h, &share)| ProfileCsvRow {
                day_type: row.day_type.label(),
                season: row.season.label(),
                sector: &names[row.sector],
                days: row.days,
                hour: h,
                share,
            })
        }),
    )?;
    manifest.phase("write");
    manifest.write(serde_json::json!({ "solutions": solutions.len(), "days": cal.len() }))?;
    Ok(Outcome::default())
}

#[derive(Debug, Clone, Serialize)]
struct MonthlyRow<'a> {
    sector: &'a str,
    month: YearMonth,
    mean_mwh: f64,
    q025: f64,
    q975: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ResidualRow {
    date: NaiveDate,
    energy_mwh: f64,
    mean_row_sum: f64,
    max_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
struct CorrelationCsvRow<'a> {
    sector: &'a str,
    months: usize,
    bss_r: f64,
    naive_r: f64,
}

/// Projects new load curves on every retained solution's sources and
/// aggregates monthly sector consumption.
pub fn cmd_nowcast(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut manifest = Manifest::new("nowcast", cfg);
    let now = cfg
        .nowcast
        .as_ref()
        .ok_or_else(|| Error::Config("the [nowcast] section with the new load file is required".into()))?;
    let prepared = load_prepared(cfg)?;
    let (_, solutions) = load_solutions(cfg)?;
    let (curves, ..) = load_curves(&now.load, cfg, false)?;
    if curves.samples() != prepared.curves.samples() {
        return Err(Error::ShapeMismatch("new curves use a different number of samples per day".into()));
    }
    manifest.phase("curves");
    let projection = ProjectionConfig {
        seed: cfg.seed,
        ..cfg.projection.clone()
    };
    let projections = project_ensemble(curves.x.view(), &solutions, &projection)?;
    manifest.phase("projection");
    let c0s: Vec<Array2<f64>> = projections.iter().map(|p| p.c0.clone()).collect();
    let estimates = monthly_consumption(&c0s, curves.energy.view(), prepared.a.view(), &curves.calendar)?;
    let names = &prepared.sectors.names;
    let dir = cfg.dir("nowcast");
    write_rows(
        &dir.join("monthly_sectors.csv"),
        estimates.iter().map(|e| MonthlyRow {
            sector: &names[e.sector],
            month: e.month,
            mean_mwh: e.energy,
            q025: e.q025,
            q975: e.q975,
        }),
    )?;
    let row_sums = crate::nowcast::mean_row_sums(&projections);
    write_rows(
        &dir.join("daily_residuals.csv"),
        curves.calendar.iter().enumerate().map(|(i, l)| ResidualRow {
            date: l.date,
            energy_mwh: curves.energy[i],
            mean_row_sum: row_sums[i],
            max_residual: projections.iter().map(|p| p.residual_per_day[i]).fold(0.0, f64::max),
        }),
    )?;

    let mut notices = Vec::new();
    let corr_path = dir.join("correlations.csv");
    let mut details = serde_json::json!({
        "solutions": solutions.len(),
        "days": curves.n_days(),
        "max_residual": crate::nowcast::max_residual(&projections),
    });
    match &now.msi {
        Some(msi) => {
            let table = IndicatorTable::load(msi)?;
            let rows = score(&estimates, &table, names)?;
            write_rows(
                &corr_path,
                rows.iter().map(|r| CorrelationCsvRow {
                    sector: &r.sector,
                    months: r.months,
                    bss_r: r.bss,
                    naive_r: r.naive,
                }),
            )?;
            details["correlations"] = serde_json::to_value(&rows).expect("serializable");
        }
        None => {
            if corr_path.exists() {
                std::fs::remove_file(&corr_path).map_err(|e| Error::io(&corr_path, e))?;
            }
            notices.push("no indicators for the new period (nowcast.msi); correlations.csv not written".into());
        }
    }
    manifest.phase("write");
    manifest.write(details)?;
    Ok(Outcome { notices })
}

/// Writes a synthetic dataset with known ground truth and a ready-to-run
/// configuration for it.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let mut manifest = Manifest::new("synth", cfg);
    let mut spec = cfg.synth.spec.clone();
    spec.seed = cfg.seed;
    if let Some(map) = cfg.model.sector_map()? {
        spec.sectors = map;
    }
    let (curves, asc, msi, truth) = generate(&spec)?;
    let holdout = cfg.synth.holdout_days;
    if holdout >= curves.n_days() {
        return Err(Error::InvalidSpec(format!(
            "holdout of {holdout} days leaves no training data out of {}",
            curves.n_days()
        )));
    }
    manifest.phase("generate");
    let split = curves.calendar.get(curves.n_days() - holdout).map(|l| l.date);
    let train = curves.select_days(|l| split.is_none_or(|s| l.date < s));
    if split.is_some_and(|s| s.ordinal() != 1) {
        return Err(Error::InvalidSpec(
            "the held-out days must start a new calendar year so training years stay complete".into(),
        ));
    }
    let dir = cfg.dir("synth");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_load_csv(&dir.join("load.csv"), &train)?;
    let test_path = dir.join("load_test.csv");
    if let Some(split) = split {
        let test = curves.select_days(|l| l.date >= split);
        write_load_csv(&test_path, &test)?;
    } else if test_path.exists() {
        std::fs::remove_file(&test_path).map_err(|e| Error::io(&test_path, e))?;
    }
    let train_years = train.years();
    let asc_rows: Vec<_> = asc.rows.iter().filter(|r| train_years.contains(&r.year)).collect();
    write_rows(&dir.join("asc.csv"), asc_rows)?;
    write_rows(&dir.join("msi.csv"), &msi.rows)?;
    let holidays: String = spec.holidays.iter().map(|d| format!("{d}\n")).collect();
    write_text(&dir.join("holidays.txt"), &holidays)?;
    let sources = source_labels(&spec.sectors, truth.s_true.nrows());
    let hours = hour_labels(spec.samples_per_day);
    let dates: Vec<String> = curves.calendar.iter().map(|l| l.date.to_string()).collect();
    write_matrix(&dir.join("truth_S.csv"), truth.s_true.view(), Some(&sources), Some(&hours))?;
    write_matrix(&dir.join("truth_C.csv"), truth.c_true.view(), Some(&dates), Some(&sources))?;

    let mut text = String::new();
    text.push_str(&format!("seed = {}\nout = \"out\"\n\n[data]\nload = \"load.csv\"\nasc = \"asc.csv\"\nmsi = \"msi.csv\"\nholidays = \"holidays.txt\"\n\n", cfg.seed));
    text.push_str(&format!("[model]\nk = {}\n\n[model.sectors]\n", truth.s_true.nrows()));
    for (name, list) in spec.sectors.names.iter().zip(&spec.sectors.sources) {
        let idx: Vec<String> = list.iter().map(|i| (i + 1).to_string()).collect();
        text.push_str(&format!("{name} = [{}]\n", idx.join(", ")));
    }
    text.push_str("\n[ensemble]\nruns = 50\ncluster = { mode = \"auto_gap\" }\n");
    if holdout > 0 {
        text.push_str("\n[nowcast]\nload = \"load_test.csv\"\nmsi = \"msi.csv\"\n");
    }
    write_text(&dir.join("config.toml"), &text)?;
    manifest.phase("write");
    manifest.write(serde_json::json!({
        "days": curves.n_days(),
        "holdout_days": holdout,
        "sources": sources,
    }))?;
    Ok(Outcome {
        notices: vec![format!("synthetic dataset written to {}", dir.display())],
    })
}

/// SVG plots and a short text summary of a fitted run.
pub fn cmd_report(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut manifest = Manifest::new("report", cfg);
    let prepared = load_prepared(cfg)?;
    let (summary, solutions) = load_solutions(cfg)?;
    let medoid = summary
        .retained
        .iter()
        .position(|&s| s == summary.medoid_seed)
        .unwrap_or(0);
    let dir = cfg.dir("report");
    let sources: Vec<Array2<f64>> = solutions.iter().map(|s| s.s.clone()).collect();
    write_text(
        &dir.join("sources.svg"),
        &report::sources_chart(&sources, medoid, &prepared.sources).to_svg(),
    )?;

    let path = cfg.dir("ensemble").join("losses.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut losses = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(&path, e))?;
        let seed: u64 = rec.get(0).and_then(|s| s.parse().ok()).unwrap_or_default();
        losses.push((seed, rec.get(2).and_then(|s| s.parse::<f64>().ok())));
    }
    write_text(
        &dir.join("losses.svg"),
        &report::losses_chart(&losses, &summary.retained, summary.threshold).to_svg(),
    )?;

    let series = sector_estimates(&prepared, &solutions)?;
    let p = prepared.curves.samples();
    let first_monday = prepared
        .curves
        .calendar
        .iter()
        .position(|l| l.date.weekday() == chrono::Weekday::Mon)
        .unwrap_or(0);
    write_text(
        &dir.join("weekly.svg"),
        &report::weekly_chart(&series, &prepared.sectors.names, p, first_monday, 7).to_svg(),
    )?;

    let cons = prepared.constraints();
    let medoid_sol = &solutions[medoid];
    let terms = loss(
        prepared.curves.x.view(),
        medoid_sol.c.view(),
        medoid_sol.s.view(),
        &cons,
        cfg.solver.alpha,
        cfg.solver.beta,
    )?;
    let mut text = String::new();
    text.push_str(&format!("lcnmf {VERSION}\n\n"));
    text.push_str(&format!(
        "days: {}  months: {}  K: {}\n",
        prepared.curves.n_days(),
        prepared.months.len(),
        summary.k
    ));
    text.push_str(&format!(
        "runs: {}  retained: {}  failed: {}  threshold: {:.6e}\n",
        summary.runs,
        summary.retained.len(),
        summary.failed,
        summary.threshold
    ));
    text.push_str(&format!(
        "medoid seed {}: loss {:.6e} (fit {:.6e}, monthly {:.6e}, row sums {:.6e})\n",
        summary.medoid_seed, terms.total, terms.fit, terms.pen_c, terms.pen_s
    ));
    text.push_str(&format!(
        "max |row-sum(C) - 1|: {:.3e}\nmax |row-sum(S) - 1|: {:.3e}\nmax ||BCA - Y|| / ||Y||: {:.3e}\n\n",
        summary.max_c_row_sum_deviation, summary.max_s_row_sum_deviation, summary.max_constraint_residual
    ));
    text.push_str("sector          share of energy\n");
    let total: f64 = series.iter().map(|s| s.daily_energy.mean.iter().sum::<f64>()).sum();
    for (name, s) in prepared.sectors.names.iter().zip(&series) {
        let e: f64 = s.daily_energy.mean.iter().sum();
        text.push_str(&format!("{name:<16}{:.4}\n", e / total));
    }
    write_text(&dir.join("summary.txt"), &text)?;
    manifest.phase("write");
    manifest.write(serde_json::json!({ "medoid_seed": summary.medoid_seed }))?;
    Ok(Outcome::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_is_one_based_and_ordered() {
        let cfg = RunConfig::parse(
            "[model]\nk = 5\n[model.sectors]\nservices = [4, 5]\nhousehold = [1, 2]\nindustry = [3]\n",
            Path::new("."),
        )
        .unwrap();
        let map = cfg.model.sector_map().unwrap().unwrap();
        assert_eq!(map.names, ["services", "household", "industry"]);
        assert_eq!(map.sources, vec![vec![3, 4], vec![0, 1], vec![2]]);
        assert_eq!(source_labels(&map, 5), ["household_1", "household_2", "industry", "services_1", "services_2"]);
    }

    #[test]
    fn zero_index_rejected() {
        let cfg = RunConfig::parse("[model.sectors]\nx = [0]\n", Path::new(".")).unwrap();
        assert!(matches!(cfg.model.sector_map(), Err(Error::Config(_))));
    }

    #[test]
    fn k_auto_and_fixed() {
        let auto = RunConfig::parse("[model]\nk = \"auto\"\n", Path::new(".")).unwrap();
        assert_eq!(auto.model.k, KChoice::Auto(AutoK::Auto));
        let fixed = RunConfig::parse("[model]\nk = 3\n", Path::new(".")).unwrap();
        assert_eq!(fixed.model.k, KChoice::Fixed(3));
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("sed = 1\n", Path::new(".")), Err(Error::Config(_))));
        let cfg = RunConfig::parse("[ensemble]\nruns = 0\n", Path::new(".")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig::parse("[model]\nk = 2\n[model.sectors]\na = [1]\nb = [2]\nc = [2]\n", Path::new(".")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::parse(
            "[data]\nload = \"l.csv\"\nasc = \"/abs/a.csv\"\nmsi = \"m.csv\"\n",
            Path::new("/base"),
        )
        .unwrap();
        let d = cfg.data.unwrap();
        assert_eq!(d.load, PathBuf::from("/base/l.csv"));
        assert_eq!(d.asc, PathBuf::from("/abs/a.csv"));
        assert_eq!(cfg.out, PathBuf::from("/base/out"));
    }

    #[test]
    fn missing_input_is_a_config_error() {
        let cfg = RunConfig::parse(
            "[data]\nload = \"nope.csv\"\nasc = \"a.csv\"\nmsi = \"m.csv\"\n",
            Path::new("/nonexistent"),
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_overrides() {
        let mut cfg = RunConfig::default();
        let h = cfg.hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, cfg.hash());
        cfg.seed = 9;
        assert_ne!(h, cfg.hash());
    }

    #[test]
    fn timestamps_roll_over_midnight() {
        let d = NaiveDate::from_ymd_opt(2021, 12, 31).unwrap();
        assert_eq!(timestamp(d, 5), "2021-12-31T05:00:00");
        assert_eq!(timestamp(d, 24), "2022-01-01T00:00:00");
    }
}
