//! Core of the MedLog event-level logging protocol for clinical AI.

pub mod assembly;
pub mod blob;
pub mod canonical;
pub mod collector;
pub mod drift;
pub mod policy;
pub mod record;
pub mod segment;
pub mod spool;
pub mod store;
pub mod testkit;
pub mod time;

pub use record::*;
pub use time::{Clock, ManualClock, SystemClock, Timestamp};

pub type Histogram = drift::Histogram<f64>;
pub type FeatureWindow = drift::FeatureWindow<f64>;
pub type DriftConfig = drift::DriftConfig<f64>;
pub type DriftMonitor = drift::DriftMonitor<f64>;
pub type DriftReport = drift::DriftReport<f64>;
pub type ImpactReport = drift::ImpactReport<f64>;
pub type ScenarioOutcome = drift::ScenarioOutcome<f64>;
