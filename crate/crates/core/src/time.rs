//! GPS time representation.
//!
//! Every timestamp inside the crate is expressed in the GPS time scale as a
//! (week, seconds-of-week) pair. Conversions from the other system time
//! scales found in RINEX files (UTC for GLONASS, BDT for BeiDou) happen at
//! parse time.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Sub};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

pub const SECONDS_PER_WEEK: f64 = 604_800.0;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// BDT starts on 2006-01-01, which is GPS week 1356. BDT = GPST - 14 s.
pub const BDT_WEEK_OFFSET: i32 = 1356;
pub const BDT_TO_GPST_SECONDS: f64 = 14.0;

/// (UTC date when it takes effect, GPST - UTC in seconds)
const LEAP_SECONDS: &[((i32, u32, u32), f64)] = &[
    ((2017, 1, 1), 18.0),
    ((2015, 7, 1), 17.0),
    ((2012, 7, 1), 16.0),
    ((2009, 1, 1), 15.0),
    ((2006, 1, 1), 14.0),
    ((1999, 1, 1), 13.0),
    ((1997, 7, 1), 12.0),
    ((1996, 1, 1), 11.0),
    ((1994, 7, 1), 10.0),
    ((1993, 7, 1), 9.0),
    ((1992, 7, 1), 8.0),
    ((1991, 1, 1), 7.0),
    ((1990, 1, 1), 6.0),
    ((1988, 1, 1), 5.0),
    ((1985, 7, 1), 4.0),
    ((1983, 7, 1), 3.0),
    ((1982, 7, 1), 2.0),
    ((1981, 7, 1), 1.0),
];

fn gps_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1980, 1, 6).expect("valid date")
}

/// Broken-down calendar time, as written in RINEX epoch fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calendar {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
    pub second: f64,
}

/// A GPS time instant: week number and seconds of week.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GnssTime {
    week: i32,
    tow: f64,
}

impl GnssTime {
    /// Builds a time, carrying any `tow` outside `[0, 604800)` into the week.
    pub fn new(week: i32, tow: f64) -> Self {
        let carry = (tow / SECONDS_PER_WEEK).floor();
        let mut tow = tow - carry * SECONDS_PER_WEEK;
        let mut week = week + carry as i32;
        if tow >= SECONDS_PER_WEEK {
            tow -= SECONDS_PER_WEEK;
            week += 1;
        }
        if tow < 0.0 {
            tow = 0.0;
        }
        Self { week, tow }
    }

    pub fn week(&self) -> i32 {
        self.week
    }

    pub fn tow(&self) -> f64 {
        self.tow
    }

    /// Seconds since the GPS epoch (1980-01-06 00:00:00).
    pub fn total_seconds(&self) -> f64 {
        self.week as f64 * SECONDS_PER_WEEK + self.tow
    }

    /// Interprets a calendar date as a GPS-time-scale instant.
    pub fn from_calendar(cal: Calendar) -> Option<Self> {
        let date = NaiveDate::from_ymd_opt(cal.year, cal.month, cal.day)?;
        if cal.hour > 23 || cal.minute > 59 || !(0.0..61.0).contains(&cal.second) {
            return None;
        }
        let days = date.signed_duration_since(gps_epoch()).num_days();
        let week = days.div_euclid(7) as i32;
        let dow = days.rem_euclid(7) as f64;
        let tow = dow * SECONDS_PER_DAY + cal.hour as f64 * 3600.0 + cal.minute as f64 * 60.0 + cal.second;
        Some(Self::new(week, tow))
    }

    /// Interprets a calendar date in UTC and converts it to GPS time.
    pub fn from_utc_calendar(cal: Calendar) -> Option<Self> {
        let leap = leap_seconds(cal.year, cal.month, cal.day);
        Some(Self::from_calendar(cal)? + leap)
    }

    /// Interprets a calendar date in BeiDou time and converts it to GPS time.
    pub fn from_bdt_calendar(cal: Calendar) -> Option<Self> {
        Some(Self::from_calendar(cal)? + BDT_TO_GPST_SECONDS)
    }

    /// Converts BDT week / seconds-of-week to GPS time.
    pub fn from_bdt(week: i32, sow: f64) -> Self {
        Self::new(week + BDT_WEEK_OFFSET, sow + BDT_TO_GPST_SECONDS)
    }

    /// Calendar representation in the GPS time scale.
    pub fn to_calendar(&self) -> Calendar {
        // Round to 100 ns so that printing never produces 60.0000000 seconds.
        let tow = (self.tow * 1e7).round() / 1e7;
        let t = Self::new(self.week, tow);
        let day_index = (t.tow / SECONDS_PER_DAY).floor();
        let sod = t.tow - day_index * SECONDS_PER_DAY;
        let days = t.week as i64 * 7 + day_index as i64;
        let date = gps_epoch() + Duration::days(days);
        let hour = (sod / 3600.0).floor();
        let minute = ((sod - hour * 3600.0) / 60.0).floor();
        let second = sod - hour * 3600.0 - minute * 60.0;
        Calendar {
            year: date.year(),
            month: date.month(),
            day: date.day(),
            hour: hour as u32,
            minute: minute as u32,
            second,
        }
    }
}

/// GPST - UTC at the given UTC date.
pub fn leap_seconds(year: i32, month: u32, day: u32) -> f64 {
    LEAP_SECONDS
        .iter()
        .find(|((y, m, d), _)| (year, month, day) >= (*y, *m, *d))
        .map(|(_, s)| *s)
        .unwrap_or(0.0)
}

impl PartialEq for GnssTime {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for GnssTime {}

impl PartialOrd for GnssTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GnssTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.week.cmp(&other.week).then_with(|| self.tow.total_cmp(&other.tow))
    }
}

impl Sub for GnssTime {
    type Output = f64;

    /// Signed difference in seconds.
    fn sub(self, rhs: Self) -> f64 {
        (self.week - rhs.week) as f64 * SECONDS_PER_WEEK + (self.tow - rhs.tow)
    }
}

impl Add<f64> for GnssTime {
    type Output = GnssTime;

    fn add(self, rhs: f64) -> GnssTime {
        GnssTime::new(self.week, self.tow + rhs)
    }
}

impl Sub<f64> for GnssTime {
    type Output = GnssTime;

    fn sub(self, rhs: f64) -> GnssTime {
        GnssTime::new(self.week, self.tow - rhs)
    }
}

impl fmt::Display for GnssTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:.3}", self.week, self.tow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gps_epoch_is_week_zero() {
        let t = GnssTime::from_calendar(Calendar {
            year: 1980,
            month: 1,
            day: 6,
            hour: 0,
            minute: 0,
            second: 0.0,
        })
        .unwrap();
        assert_eq!(t.week(), 0);
        assert_eq!(t.tow(), 0.0);
    }

    #[test]
    fn known_calendar_date() {
        // 1999-09-02 is a Thursday of GPS week 1025.
        let t = GnssTime::from_calendar(Calendar {
            year: 1999,
            month: 9,
            day: 2,
            hour: 17,
            minute: 51,
            second: 44.0,
        })
        .unwrap();
        assert_eq!(t.week(), 1025);
        assert!((t.tow() - (4.0 * 86400.0 + 17.0 * 3600.0 + 51.0 * 60.0 + 44.0)).abs() < 1e-9);
    }

    #[test]
    fn utc_and_bdt_offsets() {
        let cal = Calendar {
            year: 2020,
            month: 6,
            day: 1,
            hour: 0,
            minute: 0,
            second: 0.0,
        };
        let gps = GnssTime::from_calendar(cal).unwrap();
        assert_eq!(GnssTime::from_utc_calendar(cal).unwrap() - gps, 18.0);
        assert_eq!(GnssTime::from_bdt_calendar(cal).unwrap() - gps, 14.0);
        let bdt = GnssTime::from_bdt(0, 0.0);
        assert_eq!(bdt.week(), 1356);
        assert_eq!(bdt.tow(), 14.0);
    }

    #[test]
    fn week_carry() {
        let t = GnssTime::new(2000, 604_799.5) + 1.0;
        assert_eq!(t.week(), 2001);
        assert!((t.tow() - 0.5).abs() < 1e-9);
        let back = t - 1.0;
        assert_eq!(back.week(), 2000);
        assert!(t > back);
        assert!((t - back - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn calendar_round_trip(week in 900i32..2500, tow in 0.0f64..604_799.0) {
            let tow = (tow * 1000.0).round() / 1000.0;
            let t = GnssTime::new(week, tow);
            let back = GnssTime::from_calendar(t.to_calendar()).unwrap();
            prop_assert!((back - t).abs() < 1e-6);
        }

        #[test]
        fn ordering_matches_difference(a in 0.0f64..1e9, b in 0.0f64..1e9) {
            let ta = GnssTime::new(0, a);
            let tb = GnssTime::new(0, b);
            prop_assert_eq!(ta < tb, (ta - tb) < 0.0);
            prop_assert!(ta.tow() >= 0.0 && ta.tow() < SECONDS_PER_WEEK);
        }
    }
}
