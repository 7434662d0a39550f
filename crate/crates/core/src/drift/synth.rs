use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    cast, simulate_impact, BinSpec, DriftConfig, DriftError, DriftMonitor, DriftReport, ImpactReport, Quarter, Scalar,
    Thresholds, Verdict, DEFAULT_RESERVOIR_K,
};
use crate::time::Timestamp;

/// Stand-in risk model: logistic in the standardized feature value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticScorer {
    pub intercept: f64,
    /// Log-odds per baseline standard deviation.
    pub coefficient: f64,
}

impl LogisticScorer {
    pub fn score(&self, x: f64, mean: f64, sd: f64) -> f64 {
        let z = self.intercept + self.coefficient * (x - mean) / sd;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Declarative description of the LDH case study on synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdhScenario {
    pub feature: String,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    /// Training-period window.
    pub reference: Quarter,
    pub first_snapshot: Quarter,
    pub snapshots: u32,
    pub onset: Timestamp,
    /// Mean shift added per quarter after onset, in baseline SDs.
    pub ramp_sd_per_quarter: f64,
    pub n_per_quarter: u32,
    pub seed: u64,
    pub bins: BinSpec<f64>,
    #[serde(default)]
    pub thresholds: Thresholds<f64>,
    pub scorer: LogisticScorer,
    pub impact_thresholds: Vec<f64>,
}

impl LdhScenario {
    pub fn from_json(bytes: &[u8]) -> Result<Self, DriftError> {
        let s: LdhScenario = serde_json::from_slice(bytes).map_err(|e| DriftError::BadScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        let bad = |m: &str| Err(DriftError::BadScenario(m.to_owned()));
        if self.feature.is_empty() {
            return bad("feature must be non-empty");
        }
        if !(self.baseline_mean.is_finite() && self.baseline_sd.is_finite() && self.baseline_sd > 0.0) {
            return bad("baseline mean must be finite and sd positive");
        }
        if !self.ramp_sd_per_quarter.is_finite() {
            return bad("ramp must be finite");
        }
        if self.first_snapshot <= self.reference {
            return bad("first snapshot must come after the reference window");
        }
        if self.snapshots == 0 || self.n_per_quarter == 0 {
            return bad("snapshots and n_per_quarter must be positive");
        }
        if !(self.scorer.intercept.is_finite() && self.scorer.coefficient.is_finite()) {
            return bad("scorer parameters must be finite");
        }
        if self.impact_thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return bad("impact thresholds must be finite and non-negative");
        }
        self.bins.edges()?;
        self.thresholds.validate()
    }

    /// Windows in stream order: the reference, then each snapshot.
    pub fn windows(&self) -> Vec<Quarter> {
        let mut v = vec![self.reference];
        let mut q = self.first_snapshot;
        for _ in 0..self.snapshots {
            v.push(q);
            q = q.next();
        }
        v
    }

    /// Mean shift at `at`, in baseline SDs.
    pub fn shift_sd(&self, at: Timestamp) -> f64 {
        if at < self.onset {
            return 0.0;
        }
        let k = Quarter::of(self.onset).until(Quarter::of(at)) + 1;
        self.ramp_sd_per_quarter * k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation<T> {
    pub value: T,
    pub at: Timestamp,
}

/// Deterministic synthetic feature stream. Each window gets
/// `n_per_quarter` values at evenly spaced instants; values at or after
/// the onset are shifted by the quarter's ramp step.
pub fn synth_ldh_stream<T: Scalar>(s: &LdhScenario) -> Result<Vec<Observation<T>>, DriftError> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let noise = Normal::new(0.0, s.baseline_sd).map_err(|e| DriftError::BadScenario(e.to_string()))?;
    let n = i64::from(s.n_per_quarter);
    let mut out = Vec::with_capacity(s.windows().len() * s.n_per_quarter as usize);
    for q in s.windows() {
        let (from, to) = (q.start().as_millis(), q.next().start().as_millis());
        for i in 0..n {
            let at = Timestamp::from_millis(from + (to - from) * (2 * i + 1) / (2 * n));
            let mean = s.baseline_mean + s.shift_sd(at) * s.baseline_sd;
            out.push(Observation {
                value: cast(mean + noise.sample(&mut rng)),
                at,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome<T> {
    pub feature: String,
    pub onset_window: Quarter,
    pub reports: Vec<DriftReport<T>>,
    /// First window whose verdict is drift.
    pub first_drift: Option<Quarter>,
    /// Quarters from the onset window to `first_drift`.
    pub detection_lag: Option<i64>,
    /// Scores with and without the drift, over every post-onset value.
    pub impact: ImpactReport<T>,
    /// Bin centres and normalized counts per window.
    pub densities: BTreeMap<Quarter, Vec<(T, T)>>,
}

impl<T> ScenarioOutcome<T> {
    pub fn max_verdict(&self) -> Verdict {
        self.reports.iter().map(|r| r.verdict).max().unwrap_or(Verdict::Stable)
    }
}

/// Generate the stream, feed it through a monitor and simulate the impact
/// on the stand-in scorer.
pub fn run_scenario<T: Scalar>(s: &LdhScenario) -> Result<ScenarioOutcome<T>, DriftError> {
    let stream = synth_ldh_stream::<T>(s)?;
    let config = DriftConfig {
        reference: s.reference,
        bins: BinSpec {
            lo: cast(s.bins.lo),
            hi: cast(s.bins.hi),
            bins: s.bins.bins,
        },
        feature_bins: BTreeMap::new(),
        reservoir_k: DEFAULT_RESERVOIR_K,
        thresholds: Thresholds {
            psi_warn: cast(s.thresholds.psi_warn),
            psi_drift: cast(s.thresholds.psi_drift),
            consecutive_required: s.thresholds.consecutive_required,
        },
        seed: s.seed,
    };
    let mut monitor = DriftMonitor::new(config)?;
    let mut baseline = Vec::new();
    let mut drifted = Vec::new();
    for o in &stream {
        monitor.observe(&s.feature, o.value, o.at);
        let shift = s.shift_sd(o.at);
        if shift != 0.0 {
            let x = o.value.to_f64().expect("finite");
            let corrected = x - shift * s.baseline_sd;
            baseline.push(cast::<T>(s.scorer.score(corrected, s.baseline_mean, s.baseline_sd)));
            drifted.push(cast::<T>(s.scorer.score(x, s.baseline_mean, s.baseline_sd)));
        }
    }
    if baseline.is_empty() {
        // No post-onset values: every score is unchanged.
        baseline.push(T::zero());
        drifted.push(T::zero());
    }
    let thresholds: Vec<T> = s.impact_thresholds.iter().map(|&t| cast(t)).collect();
    let impact = simulate_impact(&baseline, &drifted, &thresholds)?;
    let reports = monitor.report(&s.feature)?;
    let onset_window = Quarter::of(s.onset);
    let first_drift = reports.iter().find(|r| r.verdict == Verdict::Drift).map(|r| r.current_window);
    let densities = monitor
        .windows(&s.feature)
        .map(|w| (w.window, w.histogram.density()))
        .collect();
    Ok(ScenarioOutcome {
        feature: s.feature.clone(),
        onset_window,
        first_drift,
        detection_lag: first_drift.map(|q| onset_window.until(q)),
        reports,
        impact,
        densities,
    })
}
