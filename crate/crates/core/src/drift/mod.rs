//! Per-feature distribution monitoring over calendar-quarter windows.
//!
//! Everything here is generic over the float type; `f64` aliases live at the
//! crate root.

mod histogram;
mod monitor;
mod stats;
mod synth;
mod verdict;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

pub use histogram::{BinSpec, Histogram};
pub use monitor::{DriftConfig, DriftMonitor, DriftReport, FeatureWindow, Quarter, Reservoir, DEFAULT_RESERVOIR_K};
pub use stats::{ks_statistic, psi, simulate_impact, ImpactReport, PSI_EPSILON};
pub use synth::{run_scenario, synth_ldh_stream, LdhScenario, LogisticScorer, Observation, ScenarioOutcome};
pub use verdict::{drift_verdict, Thresholds, Verdict, VerdictTracker};

/// Float types the drift statistics are computed in.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

impl<T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static> Scalar for T {}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriftError {
    #[error("histograms have different bin edges")]
    EdgeMismatch,
    #[error("histogram has no observations")]
    EmptyHistogram,
    #[error("sample is empty")]
    EmptySample,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("length mismatch: {0} baseline scores vs {1} drifted scores")]
    LengthMismatch(usize, usize),
    #[error("invalid bin edges: {0}")]
    BadEdges(String),
    #[error("invalid thresholds: {0}")]
    BadThresholds(String),
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("invalid window label {0:?}")]
    BadWindow(String),
    #[error("no observations for {feature:?} in reference window {window}")]
    NoReference { feature: String, window: String },
}

pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts into any Float")
}
