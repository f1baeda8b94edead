//! Timestamp parsing and hour arithmetic shared by every stage.

use chrono::{NaiveDate, NaiveDateTime};

pub type Timestamp = NaiveDateTime;

pub const SECONDS_PER_HOUR: i64 = 3600;

const FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
];

/// Parses a timezone-naive ISO-8601 timestamp. A bare date is read as midnight.
pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    for fmt in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

pub fn format_timestamp(t: &Timestamp) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

/// Whole seconds from `from` to `to` (negative when `to` precedes `from`).
pub fn seconds_between(from: &Timestamp, to: &Timestamp) -> i64 {
    (*to - *from).num_seconds()
}

pub fn hours_between(from: &Timestamp, to: &Timestamp) -> f64 {
    let d = *to - *from;
    // Sub-second precision matters only for fractional-second inputs.
    let micros = d.num_microseconds().unwrap_or(d.num_seconds() * 1_000_000);
    micros as f64 / 3.6e9
}

pub fn hour_floor(seconds: i64) -> i64 {
    seconds.div_euclid(SECONDS_PER_HOUR)
}

pub fn hour_ceil(seconds: i64) -> i64 {
    -(-seconds).div_euclid(SECONDS_PER_HOUR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_separators_and_dates() {
        let a = parse_timestamp("2101-03-04 05:06:07").unwrap();
        let b = parse_timestamp("2101-03-04T05:06:07").unwrap();
        assert_eq!(a, b);
        assert_eq!(
            parse_timestamp("2101-03-04").unwrap(),
            parse_timestamp("2101-03-04 00:00:00").unwrap()
        );
        assert!(parse_timestamp("04/03/2101").is_none());
        assert_eq!(format_timestamp(&a), "2101-03-04 05:06:07");
    }

    #[test]
    fn floor_and_ceil_handle_negatives() {
        assert_eq!(hour_floor(-1), -1);
        assert_eq!(hour_floor(0), 0);
        assert_eq!(hour_floor(3599), 0);
        assert_eq!(hour_floor(3600), 1);
        assert_eq!(hour_ceil(1), 1);
        assert_eq!(hour_ceil(3600), 1);
        assert_eq!(hour_ceil(-1), 0);
        assert_eq!(hour_ceil(0), 0);
    }
}
