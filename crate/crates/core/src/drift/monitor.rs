use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::{ks_statistic, psi, BinSpec, DriftError, Histogram, Scalar, Thresholds, Verdict, VerdictTracker};
use crate::record::MedLogRecord;
use crate::time::Timestamp;

pub const DEFAULT_RESERVOIR_K: usize = 1000;

/// A calendar quarter in UTC, written `2023Q1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter {
    pub year: i32,
    /// 1 to 4.
    pub q: u8,
}

impl Quarter {
    pub fn new(year: i32, q: u8) -> Result<Self, DriftError> {
        if !(1..=4).contains(&q) {
            return Err(DriftError::BadWindow(format!("{year}Q{q}")));
        }
        Ok(Quarter { year, q })
    }

    pub fn of(at: Timestamp) -> Self {
        let dt = at.datetime();
        Quarter {
            year: dt.year(),
            q: (dt.month0() / 3 + 1) as u8,
        }
    }

    pub fn start(&self) -> Timestamp {
        let month = u32::from(self.q - 1) * 3 + 1;
        Timestamp::from_datetime(
            Utc.with_ymd_and_hms(self.year, month, 1, 0, 0, 0)
                .single()
                .expect("first of month is unambiguous"),
        )
    }

    pub fn next(&self) -> Self {
        if self.q == 4 {
            Quarter { year: self.year + 1, q: 1 }
        } else {
            Quarter { year: self.year, q: self.q + 1 }
        }
    }

    /// Signed number of quarters from `self` to `other`.
    pub fn until(&self, other: Quarter) -> i64 {
        (i64::from(other.year) * 4 + i64::from(other.q)) - (i64::from(self.year) * 4 + i64::from(self.q))
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.q)
    }
}

impl FromStr for Quarter {
    type Err = DriftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DriftError::BadWindow(s.to_owned());
        let (y, q) = s.split_once(['Q', 'q']).ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let q = q.parse().map_err(|_| bad())?;
        Quarter::new(year, q).map_err(|_| bad())
    }
}

impl Serialize for Quarter {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Quarter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Uniform sample of at most `k` values from a stream (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    k: usize,
    seen: u64,
    items: Vec<T>,
    rng: ChaCha8Rng,
}

impl<T: Copy> Reservoir<T> {
    pub fn new(k: usize, seed: u64) -> Self {
        Reservoir {
            k,
            seen: 0,
            items: Vec::with_capacity(k.min(4096)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, x: T) {
        self.seen += 1;
        if self.items.len() < self.k {
            self.items.push(x);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.k {
                self.items[j as usize] = x;
            }
        }
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }
}

/// Observations of one feature in one quarter.
#[derive(Debug, Clone)]
pub struct FeatureWindow<T> {
    pub feature: String,
    pub window: Quarter,
    pub count: u64,
    pub non_finite: u64,
    pub histogram: Histogram<T>,
    pub reservoir: Reservoir<T>,
}

impl<T: Scalar> FeatureWindow<T> {
    fn observe(&mut self, x: T) {
        if self.histogram.add(x) {
            self.count += 1;
            self.reservoir.push(x);
        } else {
            self.non_finite += 1;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct DriftConfig<T> {
    /// The training-period window every other window is compared against.
    pub reference: Quarter,
    pub bins: BinSpec<T>,
    /// Per-feature bin overrides.
    #[serde(default)]
    pub feature_bins: BTreeMap<String, BinSpec<T>>,
    #[serde(default = "default_k")]
    pub reservoir_k: usize,
    #[serde(default)]
    pub thresholds: Thresholds<T>,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    DEFAULT_RESERVOIR_K
}

impl<T: Scalar> DriftConfig<T> {
    pub fn new(reference: Quarter, bins: BinSpec<T>) -> Self {
        DriftConfig {
            reference,
            bins,
            feature_bins: BTreeMap::new(),
            reservoir_k: DEFAULT_RESERVOIR_K,
            thresholds: Thresholds::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        self.bins.edges()?;
        for spec in self.feature_bins.values() {
            spec.edges()?;
        }
        if self.reservoir_k == 0 {
            return Err(DriftError::BadScenario("reservoir_k must be positive".into()));
        }
        self.thresholds.validate()
    }

    fn spec_for(&self, feature: &str) -> &BinSpec<T> {
        self.feature_bins.get(feature).unwrap_or(&self.bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport<T> {
    pub feature: String,
    pub reference_window: Quarter,
    pub current_window: Quarter,
    pub reference_count: u64,
    pub current_count: u64,
    pub psi: T,
    pub ks: T,
    pub verdict: Verdict,
    pub consecutive_breaches: u32,
}

/// Quarterly windows per feature, compared against a fixed reference.
#[derive(Debug, Clone)]
pub struct DriftMonitor<T> {
    config: DriftConfig<T>,
    windows: BTreeMap<(String, Quarter), FeatureWindow<T>>,
}

fn window_seed(seed: u64, feature: &str, window: Quarter) -> u64 {
    let h = Sha256::new()
        .chain_update(feature.as_bytes())
        .chain_update([0])
        .chain_update(window.to_string().as_bytes())
        .finalize();
    seed ^ u64::from_be_bytes(h[..8].try_into().expect("8 bytes"))
}

impl<T: Scalar> DriftMonitor<T> {
    pub fn new(config: DriftConfig<T>) -> Result<Self, DriftError> {
        config.validate()?;
        Ok(DriftMonitor {
            config,
            windows: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &DriftConfig<T> {
        &self.config
    }

    pub fn observe(&mut self, feature: &str, value: T, at: Timestamp) {
        let window = Quarter::of(at);
        let key = (feature.to_owned(), window);
        let config = &self.config;
        self.windows
            .entry(key)
            .or_insert_with(|| FeatureWindow {
                feature: feature.to_owned(),
                window,
                count: 0,
                non_finite: 0,
                histogram: Histogram::from_spec(config.spec_for(feature)).expect("validated"),
                reservoir: Reservoir::new(config.reservoir_k, window_seed(config.seed, feature, window)),
            })
            .observe(value);
    }

    /// Feed every structured input feature of a record, windowed by its
    /// invocation time.
    pub fn observe_record(&mut self, record: &MedLogRecord) {
        let Some(features) = &record.inputs.features else {
            return;
        };
        for (name, &x) in features {
            let v = T::from_f64(x).unwrap_or_else(T::nan);
            self.observe(name, v, record.header.invoked_at);
        }
    }

    pub fn window(&self, feature: &str, window: Quarter) -> Option<&FeatureWindow<T>> {
        self.windows.get(&(feature.to_owned(), window))
    }

    pub fn windows<'a>(&'a self, feature: &'a str) -> impl Iterator<Item = &'a FeatureWindow<T>> + 'a {
        self.windows
            .range((feature.to_owned(), Quarter { year: i32::MIN, q: 1 })..)
            .take_while(move |((f, _), _)| f == feature)
            .map(|(_, w)| w)
    }

    pub fn features(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.windows.keys().map(|(f, _)| f.as_str()).collect();
        v.dedup();
        v
    }

    /// One report per window after the reference, in time order. Windows
    /// with no finite observations are skipped.
    pub fn report(&self, feature: &str) -> Result<Vec<DriftReport<T>>, DriftError> {
        let reference = self
            .window(feature, self.config.reference)
            .filter(|w| w.count > 0)
            .ok_or_else(|| DriftError::NoReference {
                feature: feature.to_owned(),
                window: self.config.reference.to_string(),
            })?;
        let mut tracker = VerdictTracker::new(self.config.thresholds);
        let mut out = Vec::new();
        for w in self.windows(feature) {
            if w.window <= reference.window || w.count == 0 {
                continue;
            }
            let p = psi(&reference.histogram, &w.histogram)?;
            let ks = ks_statistic(reference.reservoir.items(), w.reservoir.items())?;
            let verdict = tracker.push(p);
            out.push(DriftReport {
                feature: feature.to_owned(),
                reference_window: reference.window,
                current_window: w.window,
                reference_count: reference.count,
                current_count: w.count,
                psi: p,
                ks,
                verdict,
                consecutive_breaches: tracker.breaches(),
            });
        }
        Ok(out)
    }
}
