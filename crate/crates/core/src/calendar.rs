//! Calendar labels attached to each daily curve.
//!
//! Labelling is a pure function of the date and the holiday list. Sundays and
//! listed bank holidays are `Holiday`, Mondays keep their own type because
//! their load behaves differently from the rest of the working week, and
//! seasons are assigned by calendar quarter.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Monday,
    WorkingDay,
    Saturday,
    Holiday,
}

impl DayType {
    pub const ALL: [DayType; 4] = [
        DayType::Monday,
        DayType::WorkingDay,
        DayType::Saturday,
        DayType::Holiday,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DayType::Monday => "monday",
            DayType::WorkingDay => "working_day",
            DayType::Saturday => "saturday",
            DayType::Holiday => "holiday",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Fall,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Fall];

    /// Quarter-based: Jan–Mar winter, Apr–Jun spring, Jul–Sep summer, Oct–Dec fall.
    pub fn of(date: NaiveDate) -> Season {
        match date.month() {
            1..=3 => Season::Winter,
            4..=6 => Season::Spring,
            7..=9 => Season::Summer,
            _ => Season::Fall,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
        }
    }
}

/// A calendar month, printed as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month out of range: {month}");
        YearMonth { year, month }
    }

    pub fn of(date: NaiveDate) -> Self {
        YearMonth {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn prev_year(self) -> Self {
        YearMonth {
            year: self.year - 1,
            month: self.month,
        }
    }

    pub fn succ(self) -> Self {
        if self.month == 12 {
            YearMonth::new(self.year + 1, 1)
        } else {
            YearMonth::new(self.year, self.month + 1)
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("expected YYYY-MM, got {s:?}"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range in {s:?}"));
        }
        Ok(YearMonth { year, month })
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Bank holidays used for day-type labelling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HolidayCalendar {
    holidays: BTreeSet<NaiveDate>,
}

impl HolidayCalendar {
    pub fn new(dates: impl IntoIterator<Item = NaiveDate>) -> Self {
        HolidayCalendar {
            holidays: dates.into_iter().collect(),
        }
    }

    /// One ISO date per line; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut holidays = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let date = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|e| {
                Error::MalformedRow {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    reason: format!("bad holiday date {line:?}: {e}"),
                }
            })?;
            holidays.insert(date);
        }
        Ok(HolidayCalendar { holidays })
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.holidays.contains(&date)
    }

    pub fn dates(&self) -> impl Iterator<Item = &NaiveDate> {
        self.holidays.iter()
    }

    pub fn day_type(&self, date: NaiveDate) -> DayType {
        if self.is_holiday(date) {
            return DayType::Holiday;
        }
        match date.weekday() {
            Weekday::Sun => DayType::Holiday,
            Weekday::Sat => DayType::Saturday,
            Weekday::Mon => DayType::Monday,
            _ => DayType::WorkingDay,
        }
    }

    pub fn label(&self, date: NaiveDate) -> DayLabel {
        DayLabel {
            date,
            day_type: self.day_type(date),
            season: Season::of(date),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayLabel {
    pub date: NaiveDate,
    pub day_type: DayType,
    pub season: Season,
}

impl DayLabel {
    pub fn month(&self) -> YearMonth {
        YearMonth::of(self.date)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn seasons_follow_quarters() {
        assert_eq!(Season::of(d(2021, 7, 15)), Season::Summer);
        assert_eq!(Season::of(d(2022, 7, 15)), Season::Summer);
        assert_eq!(Season::of(d(2021, 3, 31)), Season::Winter);
        assert_eq!(Season::of(d(2021, 4, 1)), Season::Spring);
        assert_eq!(Season::of(d(2021, 12, 31)), Season::Fall);
    }

    #[test]
    fn day_types() {
        // 2021-06-01 was a Tuesday and a bank holiday in Italy (Festa della Repubblica is 06-02,
        // but any listed date works).
        let cal = HolidayCalendar::new([d(2021, 6, 1)]);
        assert_eq!(cal.day_type(d(2021, 6, 1)), DayType::Holiday);
        assert_eq!(cal.day_type(d(2021, 6, 8)), DayType::WorkingDay);
        assert_eq!(cal.day_type(d(2021, 6, 6)), DayType::Holiday); // Sunday
        assert_eq!(cal.day_type(d(2021, 6, 5)), DayType::Saturday);
        assert_eq!(cal.day_type(d(2021, 6, 7)), DayType::Monday);
    }

    #[test]
    fn year_month_round_trip() {
        let ym: YearMonth = "2023-02".parse().unwrap();
        assert_eq!(ym, YearMonth::new(2023, 2));
        assert_eq!(ym.to_string(), "2023-02");
        assert_eq!(YearMonth::new(2022, 12).succ(), YearMonth::new(2023, 1));
        assert!("2023-13".parse::<YearMonth>().is_err());
    }

    #[test]
    fn holiday_file_parsing() {
        let cal = HolidayCalendar::parse("# it\n2021-01-01\n\n2021-01-06\n", Path::new("h")).unwrap();
        assert!(cal.is_holiday(d(2021, 1, 6)));
        assert_eq!(cal.dates().count(), 2);
        assert!(HolidayCalendar::parse("2021-01-32\n", Path::new("h")).is_err());
    }
}
