//! UTC timestamps at millisecond precision and injectable clocks.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeDelta, TimeZone, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A UTC instant truncated to whole milliseconds.
///
/// Parsing accepts any RFC 3339 offset; the value is normalized to UTC and
/// always renders as `YYYY-MM-DDTHH:MM:SS.sssZ`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

#[derive(Debug, thiserror::Error)]
#[error("invalid RFC 3339 timestamp {input:?}: {reason}")]
pub struct TimestampError {
    input: String,
    reason: String,
}

impl Timestamp {
    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Self::from_millis(dt.timestamp_millis())
    }

    /// Out-of-range values saturate at chrono's representable bounds.
    pub fn from_millis(ms: i64) -> Self {
        let lo = DateTime::<Utc>::MIN_UTC.timestamp_millis();
        let hi = DateTime::<Utc>::MAX_UTC.timestamp_millis();
        Timestamp(
            Utc.timestamp_millis_opt(ms.clamp(lo, hi))
                .single()
                .expect("clamped into chrono range"),
        )
    }

    pub fn now() -> Self {
        Self::from_datetime(Utc::now())
    }

    pub fn parse(s: &str) -> Result<Self, TimestampError> {
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Self::from_datetime(dt.with_timezone(&Utc)))
            .map_err(|e| TimestampError {
                input: s.to_owned(),
                reason: e.to_string(),
            })
    }

    pub fn as_millis(&self) -> i64 {
        self.0.timestamp_millis()
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn saturating_add(&self, d: TimeDelta) -> Self {
        Self::from_millis(self.as_millis().saturating_add(d.num_milliseconds()))
    }

    pub fn saturating_sub(&self, d: TimeDelta) -> Self {
        Self::from_millis(self.as_millis().saturating_sub(d.num_milliseconds()))
    }

    /// Time elapsed from `self` to `later` (negative if `later` is earlier).
    pub fn until(&self, later: Timestamp) -> TimeDelta {
        TimeDelta::milliseconds(later.as_millis() - self.as_millis())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::Millis, true))
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Timestamp({self})")
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Source of "now" for anything with time-based behaviour (quarantine
/// deadlines, upgrade buffer windows, retention).
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// A clock that only moves when told to. Used by tests and by offline
/// compaction with an explicit `--now`.
#[derive(Debug)]
pub struct ManualClock(Mutex<Timestamp>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(Mutex::new(start))
    }

    pub fn set(&self, t: Timestamp) {
        *self.0.lock() = t;
    }

    pub fn advance(&self, d: TimeDelta) {
        let mut g = self.0.lock();
        *g = g.saturating_add(d);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.0.lock()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_normalize_to_utc() {
        let a = Timestamp::parse("2023-03-01T10:00:00+02:00").unwrap();
        let b = Timestamp::parse("2023-03-01T08:00:00Z").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "2023-03-01T08:00:00.000Z");
    }

    #[test]
    fn sub_millisecond_digits_truncate() {
        let t = Timestamp::parse("2024-01-01T00:00:00.123987Z").unwrap();
        assert_eq!(t.to_string(), "2024-01-01T00:00:00.123Z");
    }

    #[test]
    fn rejects_garbage() {
        assert!(Timestamp::parse("yesterday").is_err());
        assert!(Timestamp::parse("2024-01-01 00:00:00").is_err());
    }

    #[test]
    fn manual_clock_advances() {
        let c = ManualClock::new(Timestamp::from_millis(0));
        c.advance(TimeDelta::days(400));
        assert_eq!(c.now().as_millis(), 400 * 86_400_000);
    }
}
