//! Hourly load ingestion and daily shape curves.
//!
//! Raw measurements are placed on a wall-clock hourly grid. Each complete day
//! becomes one row of the curve matrix `X` (its load divided by its total) and
//! one entry of the energy vector `E`.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveDateTime, Timelike};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::calendar::{DayLabel, HolidayCalendar, YearMonth};
use crate::error::{Error, Result};

/// Longest run of consecutive missing hours that interpolation will fill.
pub const MAX_INTERPOLATED_GAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    /// Duplicated hours are an error; missing hours are left missing.
    Reject,
    /// Duplicated hours are averaged; short gaps are linearly interpolated.
    #[default]
    Interpolate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFlag {
    Observed,
    Interpolated,
    Averaged,
}

/// One hourly load value on the wall-clock grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadRecord {
    /// Local wall-clock hour.
    pub time: NaiveDateTime,
    /// UTC offset as read from the file; `None` for naive timestamps and for
    /// hours synthesized by interpolation.
    pub offset: Option<FixedOffset>,
    pub load_mw: f64,
    pub flag: RecordFlag,
    /// Set on hours repaired because of a daylight-saving transition.
    pub dst: bool,
}

impl LoadRecord {
    pub fn observed(time: NaiveDateTime, load_mw: f64) -> Self {
        LoadRecord {
            time,
            offset: None,
            load_mw,
            flag: RecordFlag::Observed,
            dst: false,
        }
    }

    pub fn date(&self) -> NaiveDate {
        self.time.date()
    }
}

#[derive(Debug, Deserialize)]
struct LoadRow {
    timestamp: String,
    load_mw: String,
}

fn parse_timestamp(s: &str) -> Option<(NaiveDateTime, Option<FixedOffset>)> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some((dt.naive_local(), Some(*dt.offset())));
    }
    for fmt in ["%Y-%m-%dT%H:%M%:z", "%Y-%m-%d %H:%M%:z", "%Y-%m-%d %H:%M:%S%:z"] {
        if let Ok(dt) = DateTime::parse_from_str(s, fmt) {
            return Some((dt.naive_local(), Some(*dt.offset())));
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some((dt, None));
        }
    }
    None
}

/// Reads a `timestamp,load_mw` CSV and repairs it according to `policy`.
pub fn ingest_load(path: &Path, policy: GapPolicy) -> Result<Vec<LoadRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<LoadRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let malformed = |reason: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let row = row.map_err(|e| malformed(e.to_string()))?;
        let (time, offset) = parse_timestamp(&row.timestamp)
            .ok_or_else(|| malformed(format!("unparseable timestamp {:?}", row.timestamp)))?;
        if time.minute() != 0 || time.second() != 0 {
            return Err(malformed(format!("timestamp {} is not on the hour", row.timestamp)));
        }
        let load_mw: f64 = row
            .load_mw
            .parse()
            .map_err(|_| malformed(format!("unparseable load {:?}", row.load_mw)))?;
        if !load_mw.is_finite() {
            return Err(malformed(format!("non-finite load {load_mw}")));
        }
        if load_mw < 0.0 {
            return Err(Error::NegativeLoad {
                at: row.timestamp.clone(),
                value: load_mw,
            });
        }
        records.push(LoadRecord {
            time,
            offset,
            load_mw,
            flag: RecordFlag::Observed,
            dst: false,
        });
    }
    repair(records, policy)
}

fn utc_key(r: &LoadRecord) -> Option<NaiveDateTime> {
    r.offset
        .map(|o| r.time - Duration::seconds(i64::from(o.local_minus_utc())))
}

/// Sorts records onto the hourly wall-clock grid, merging duplicated hours and
/// filling short gaps when the policy allows it.
pub fn repair(mut records: Vec<LoadRecord>, policy: GapPolicy) -> Result<Vec<LoadRecord>> {
    for r in &records {
        if r.load_mw < 0.0 {
            return Err(Error::NegativeLoad {
                at: r.time.to_string(),
                value: r.load_mw,
            });
        }
    }
    records.sort_by(|a, b| a.time.cmp(&b.time).then(utc_key(a).cmp(&utc_key(b))));

    // Merge records sharing a wall-clock hour.
    let mut merged: Vec<LoadRecord> = Vec::with_capacity(records.len());
    let mut i = 0;
    while i < records.len() {
        let mut j = i + 1;
        while j < records.len() && records[j].time == records[i].time {
            j += 1;
        }
        let group = &records[i..j];
        if group.len() == 1 {
            merged.push(group[0].clone());
        } else {
            let distinct_offsets = group
                .windows(2)
                .any(|w| matches!((w[0].offset, w[1].offset), (Some(a), Some(b)) if a != b));
            if policy == GapPolicy::Reject {
                let reason = if distinct_offsets {
                    "repeated wall-clock hour (daylight-saving fall-back)"
                } else {
                    "duplicated timestamp"
                };
                return Err(Error::NonMonotonicTime {
                    at: group[0].time.to_string(),
                    reason: reason.into(),
                });
            }
            let mean = group.iter().map(|r| r.load_mw).sum::<f64>() / group.len() as f64;
            merged.push(LoadRecord {
                time: group[0].time,
                offset: group[0].offset,
                load_mw: mean,
                flag: RecordFlag::Averaged,
                dst: distinct_offsets,
            });
        }
        i = j;
    }

    if policy == GapPolicy::Reject || merged.len() < 2 {
        return Ok(merged);
    }

    let mut out = Vec::with_capacity(merged.len() + 8);
    out.push(merged[0].clone());
    for pair in merged.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let hours = (next.time - prev.time).num_hours();
        let missing = (hours - 1) as usize;
        if (1..=MAX_INTERPOLATED_GAP).contains(&missing) {
            let dst = matches!((prev.offset, next.offset), (Some(a), Some(b)) if a != b);
            for step in 1..=missing {
                let t = step as f64 / hours as f64;
                out.push(LoadRecord {
                    time: prev.time + Duration::hours(step as i64),
                    offset: None,
                    load_mw: prev.load_mw + t * (next.load_mw - prev.load_mw),
                    flag: RecordFlag::Interpolated,
                    dst,
                });
            }
        }
        out.push(next.clone());
    }
    Ok(out)
}

/// Days touched by a daylight-saving repair.
pub fn dst_days(records: &[LoadRecord]) -> Vec<NaiveDate> {
    let mut days: Vec<NaiveDate> = records.iter().filter(|r| r.dst).map(|r| r.date()).collect();
    days.dedup();
    days
}

/// Number of samples kept per daily curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SamplesPerDay {
    /// 24 left-closed hourly buckets.
    #[default]
    #[serde(rename = "24")]
    Hourly24,
    /// 25 instants 00:00..24:00; the 24:00 value is the next day's 00:00 value
    /// (or the day's own 00:00 value on the final day).
    #[serde(rename = "25")]
    Instants25,
}

impl SamplesPerDay {
    pub fn count(self) -> usize {
        match self {
            SamplesPerDay::Hourly24 => 24,
            SamplesPerDay::Instants25 => 25,
        }
    }
}

/// Daily shapes `X` (n×p), energies `E` and calendar labels, ordered by date.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveMatrix {
    pub x: Array2<f64>,
    pub energy: Array1<f64>,
    pub calendar: Vec<DayLabel>,
}

impl CurveMatrix {
    pub fn n_days(&self) -> usize {
        self.x.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    /// Distinct months in date order.
    pub fn months(&self) -> Vec<YearMonth> {
        let mut months: Vec<YearMonth> = self.calendar.iter().map(|d| d.month()).collect();
        months.dedup();
        months
    }

    pub fn years(&self) -> Vec<i32> {
        let mut years: Vec<i32> = self.calendar.iter().map(|d| d.month().year).collect();
        years.dedup();
        years
    }

    pub fn total_energy(&self) -> f64 {
        self.energy.sum()
    }

    /// Energy per month, in the order of [`CurveMatrix::months`].
    pub fn monthly_totals(&self) -> Vec<f64> {
        let mut totals: Vec<f64> = Vec::new();
        let mut last: Option<YearMonth> = None;
        for (label, &e) in self.calendar.iter().zip(self.energy.iter()) {
            let m = label.month();
            if last != Some(m) {
                totals.push(0.0);
                last = Some(m);
            }
            *totals.last_mut().unwrap() += e;
        }
        totals
    }

    /// Sub-selection of days, keeping order.
    pub fn select_days(&self, keep: impl Fn(&DayLabel) -> bool) -> CurveMatrix {
        let idx: Vec<usize> = (0..self.n_days()).filter(|&i| keep(&self.calendar[i])).collect();
        CurveMatrix {
            x: self.x.select(ndarray::Axis(0), &idx),
            energy: self.energy.select(ndarray::Axis(0), &idx),
            calendar: idx.iter().map(|&i| self.calendar[i]).collect(),
        }
    }
}

/// Groups records by day and normalizes each day to a unit-sum shape.
pub fn build_curves(
    records: &[LoadRecord],
    holidays: &HolidayCalendar,
    samples: SamplesPerDay,
) -> Result<CurveMatrix> {
    let mut days: BTreeMap<NaiveDate, [Option<f64>; 24]> = BTreeMap::new();
    for r in records {
        let slot = &mut days.entry(r.date()).or_insert([None; 24])[r.time.hour() as usize];
        if slot.is_some() {
            return Err(Error::NonMonotonicTime {
                at: r.time.to_string(),
                reason: "hour present twice".into(),
            });
        }
        *slot = Some(r.load_mw);
    }

    let p = samples.count();
    let dates: Vec<NaiveDate> = days.keys().copied().collect();
    let mut x = Array2::zeros((dates.len(), p));
    let mut energy = Array1::zeros(dates.len());
    let mut calendar = Vec::with_capacity(dates.len());
    for (i, date) in dates.iter().enumerate() {
        let hours = &days[date];
        let have = hours.iter().filter(|h| h.is_some()).count();
        if have < 24 {
            return Err(Error::IncompleteDay {
                date: date.to_string(),
                have,
                need: 24,
            });
        }
        let loads: Vec<f64> = hours.iter().map(|h| h.unwrap()).collect();
        let e: f64 = loads.iter().sum();
        if e <= 0.0 {
            return Err(Error::ZeroEnergyDay {
                date: date.to_string(),
            });
        }
        let mut row: Vec<f64> = loads.clone();
        if samples == SamplesPerDay::Instants25 {
            let next = date
                .succ_opt()
                .and_then(|n| days.get(&n))
                .and_then(|h| h[0])
                .unwrap_or(loads[0]);
            row.push(next);
        }
        let norm: f64 = row.iter().sum();
        for (k, v) in row.iter().enumerate() {
            x[[i, k]] = v / norm;
        }
        // MW held for one hour
        energy[i] = e;
        calendar.push(holidays.label(*date));
    }
    Ok(CurveMatrix {
        x,
        energy,
        calendar,
    })
}

/// How network losses are reconciled between the load data and the annual
/// sector totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Spread the losses over the sectors proportionally to their totals.
    #[default]
    ScaleAsc,
    /// Use the annual totals as given.
    AsIs,
}

/// Annual sector weights `w` whose sum matches the energy covered by the data.
pub fn adjust_losses(total_energy: f64, asc: &[f64], mode: LossMode) -> Result<Vec<f64>> {
    let asc_total: f64 = asc.iter().sum();
    if asc.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::PeriodMismatch(
            "annual consumption values must be finite and non-negative".into(),
        ));
    }
    if asc_total <= 0.0 {
        return Err(Error::ZeroTotal("annual sector consumption sums to zero".into()));
    }
    if total_energy <= 0.0 {
        return Err(Error::ZeroTotal("load energy sums to zero".into()));
    }
    Ok(match mode {
        LossMode::ScaleAsc => asc.iter().map(|v| v / asc_total * total_energy).collect(),
        LossMode::AsIs => asc.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M").unwrap()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn day(date: &str, loads: &[f64]) -> Vec<LoadRecord> {
        loads
            .iter()
            .enumerate()
            .map(|(h, &v)| LoadRecord::observed(ts(&format!("{date}T{h:02}:00")), v))
            .collect()
    }

    #[test]
    fn minimal_parse() {
        let f = write_csv("timestamp,load_mw\n2021-01-01T00:00,30000\n2021-01-01T01:00,29000\n");
        let recs = ingest_load(f.path(), GapPolicy::Reject).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].load_mw, 29000.0);
    }

    #[test]
    fn duplicate_rejected() {
        let f = write_csv("timestamp,load_mw\n2021-01-01T00:00,1\n2021-01-01T00:00,2\n");
        let err = ingest_load(f.path(), GapPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::NonMonotonicTime { .. }), "{err}");
    }

    #[test]
    fn malformed_and_negative() {
        let f = write_csv("timestamp,load_mw\n2021-01-01T00:00,abc\n");
        assert!(matches!(
            ingest_load(f.path(), GapPolicy::Reject).unwrap_err(),
            Error::MalformedRow { line: 2, .. }
        ));
        let f = write_csv("timestamp,load_mw\n2021-01-01T00:00,-3\n");
        assert!(matches!(
            ingest_load(f.path(), GapPolicy::Reject).unwrap_err(),
            Error::NegativeLoad { .. }
        ));
        let f = write_csv("timestamp,load_mw\n2021-01-01T00:30,3\n");
        assert!(matches!(
            ingest_load(f.path(), GapPolicy::Reject).unwrap_err(),
            Error::MalformedRow { .. }
        ));
    }

    #[test]
    fn spring_forward_toy_day_is_interpolated() {
        // 01:00 (+01:00) = 10, 03:00 (+02:00) = 16: local 02:00 does not exist.
        let f = write_csv(
            "timestamp,load_mw\n2021-03-28T01:00:00+01:00,10\n2021-03-28T03:00:00+02:00,16\n2021-03-28T04:00:00+02:00,18\n",
        );
        let recs = ingest_load(f.path(), GapPolicy::Interpolate).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[1].time, ts("2021-03-28T02:00"));
        // hand-computed midpoint of the neighbours
        assert_eq!(recs[1].load_mw, 13.0);
        assert!(recs[1].dst);
        assert_eq!(dst_days(&recs), vec![NaiveDate::from_ymd_opt(2021, 3, 28).unwrap()]);
    }

    #[test]
    fn spring_forward_full_day_has_24_values() {
        let mut body = String::from("timestamp,load_mw\n");
        for h in 0..24 {
            if h == 2 {
                continue;
            }
            let off = if h < 2 { "+01:00" } else { "+02:00" };
            body.push_str(&format!("2021-03-28T{h:02}:00:00{off},{}\n", 100 + 10 * h));
        }
        let f = write_csv(&body);
        let recs = ingest_load(f.path(), GapPolicy::Interpolate).unwrap();
        assert_eq!(recs.len(), 24);
        assert_eq!(recs[2].load_mw, 120.0);
        let curves = build_curves(&recs, &HolidayCalendar::default(), SamplesPerDay::Hourly24).unwrap();
        assert_eq!(curves.n_days(), 1);
    }

    #[test]
    fn fall_back_hour_averaged() {
        let f = write_csv(
            "timestamp,load_mw\n2021-10-31T02:00:00+02:00,10\n2021-10-31T02:00:00+01:00,20\n2021-10-31T03:00:00+01:00,5\n",
        );
        let recs = ingest_load(f.path(), GapPolicy::Interpolate).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].load_mw, 15.0);
        assert_eq!(recs[0].flag, RecordFlag::Averaged);
        assert!(recs[0].dst);
        assert!(ingest_load(f.path(), GapPolicy::Reject).is_err());
    }

    #[test]
    fn long_gap_left_missing() {
        let mut recs = day("2021-01-04", &[1.0; 24]);
        recs.drain(5..9); // four consecutive hours
        let repaired = repair(recs, GapPolicy::Interpolate).unwrap();
        assert_eq!(repaired.len(), 20);
        let err = build_curves(&repaired, &HolidayCalendar::default(), SamplesPerDay::Hourly24)
            .unwrap_err();
        assert!(matches!(err, Error::IncompleteDay { have: 20, .. }));

        let mut recs = day("2021-01-04", &[1.0; 24]);
        recs.drain(5..8);
        assert_eq!(repair(recs, GapPolicy::Interpolate).unwrap().len(), 24);
    }

    #[test]
    fn uniform_day() {
        let recs = day("2021-01-04", &[1000.0; 24]);
        let c = build_curves(&recs, &HolidayCalendar::default(), SamplesPerDay::Hourly24).unwrap();
        assert_eq!(c.energy[0], 24000.0);
        for v in c.x.row(0) {
            assert!((v - 1.0 / 24.0).abs() < 1e-15);
        }
    }

    #[test]
    fn arithmetic_series_day() {
        let loads: Vec<f64> = (1..=24).map(|k| 100.0 * k as f64).collect();
        let c = build_curves(&day("2021-01-04", &loads), &HolidayCalendar::default(), SamplesPerDay::Hourly24)
            .unwrap();
        // 100 * 24*25/2 = 30000
        assert_eq!(c.energy[0], 30000.0);
        for k in 0..24 {
            assert!((c.x[[0, k]] - (k + 1) as f64 / 300.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_energy_day() {
        let err = build_curves(&day("2021-01-04", &[0.0; 24]), &HolidayCalendar::default(), SamplesPerDay::Hourly24)
            .unwrap_err();
        assert!(matches!(err, Error::ZeroEnergyDay { .. }));
    }

    #[test]
    fn labels_attached() {
        let holiday = NaiveDate::from_ymd_opt(2021, 7, 13).unwrap(); // a Tuesday
        let mut recs = day("2021-07-13", &[1.0; 24]);
        recs.extend(day("2021-07-15", &[1.0; 24]));
        let c = build_curves(&recs, &HolidayCalendar::new([holiday]), SamplesPerDay::Hourly24).unwrap();
        assert_eq!(c.calendar[0].day_type, crate::calendar::DayType::Holiday);
        assert_eq!(c.calendar[1].day_type, crate::calendar::DayType::WorkingDay);
        assert_eq!(c.calendar[1].season, crate::calendar::Season::Summer);
    }

    #[test]
    fn twenty_five_sample_mode() {
        let mut recs = day("2021-01-04", &[1.0; 24]);
        recs.extend(day("2021-01-05", &[3.0; 24]));
        let c = build_curves(&recs, &HolidayCalendar::default(), SamplesPerDay::Instants25).unwrap();
        assert_eq!(c.samples(), 25);
        assert!((c.x[[0, 24]] - 3.0 / 27.0).abs() < 1e-15);
        assert!((c.x[[1, 24]] - 1.0 / 25.0).abs() < 1e-15);
        assert_eq!(c.energy[0], 24.0);
    }

    #[test]
    fn loss_adjustment_examples() {
        assert_eq!(adjust_losses(440.0, &[100.0, 200.0, 100.0], LossMode::ScaleAsc).unwrap(), vec![110.0, 220.0, 110.0]);
        assert_eq!(adjust_losses(400.0, &[100.0, 200.0, 100.0], LossMode::ScaleAsc).unwrap(), vec![100.0, 200.0, 100.0]);
        // 10 * (1/4, 1/4, 2/4)
        assert_eq!(adjust_losses(10.0, &[1.0, 1.0, 2.0], LossMode::ScaleAsc).unwrap(), vec![2.5, 2.5, 5.0]);
        assert!(matches!(adjust_losses(10.0, &[0.0, 0.0], LossMode::ScaleAsc), Err(Error::ZeroTotal(_))));
        assert!(matches!(adjust_losses(0.0, &[1.0], LossMode::ScaleAsc), Err(Error::ZeroTotal(_))));
    }
}
