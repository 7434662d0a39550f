use serde::{Deserialize, Serialize};

use super::{DriftError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Warning,
    Drift,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Warning => "warning",
            Verdict::Drift => "drift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds<T> {
    pub psi_warn: T,
    pub psi_drift: T,
    pub consecutive_required: u32,
}

impl<T: Scalar> Default for Thresholds<T> {
    fn default() -> Self {
        Thresholds {
            psi_warn: T::from_f64(0.1).expect("fits"),
            psi_drift: T::from_f64(0.2).expect("fits"),
            consecutive_required: 2,
        }
    }
}

impl<T: Scalar> Thresholds<T> {
    pub fn validate(&self) -> Result<(), DriftError> {
        if !(self.psi_warn.is_finite() && self.psi_drift.is_finite()) {
            return Err(DriftError::BadThresholds("must be finite".into()));
        }
        if self.psi_warn < T::zero() || self.psi_warn > self.psi_drift {
            return Err(DriftError::BadThresholds(format!(
                "need 0 <= psi_warn <= psi_drift, got {} and {}",
                self.psi_warn, self.psi_drift
            )));
        }
        if self.consecutive_required == 0 {
            return Err(DriftError::BadThresholds("consecutive_required must be at least 1".into()));
        }
        Ok(())
    }
}

/// Folds a psi sequence into verdicts. Drift is raised after
/// `consecutive_required` windows at or above `psi_drift` and held until as
/// many consecutive windows fall below `psi_warn`.
#[derive(Debug, Clone)]
pub struct VerdictTracker<T> {
    thresholds: Thresholds<T>,
    breaches: u32,
    calm: u32,
    in_drift: bool,
}

impl<T: Scalar> VerdictTracker<T> {
    pub fn new(thresholds: Thresholds<T>) -> Self {
        VerdictTracker {
            thresholds,
            breaches: 0,
            calm: 0,
            in_drift: false,
        }
    }

    /// Current run of consecutive windows at or above `psi_drift`.
    pub fn breaches(&self) -> u32 {
        self.breaches
    }

    pub fn push(&mut self, psi: T) -> Verdict {
        let t = &self.thresholds;
        if psi >= t.psi_drift {
            self.breaches += 1;
        } else {
            self.breaches = 0;
        }
        if psi < t.psi_warn {
            self.calm += 1;
        } else {
            self.calm = 0;
        }
        if self.breaches >= t.consecutive_required {
            self.in_drift = true;
        } else if self.in_drift && self.calm >= t.consecutive_required {
            self.in_drift = false;
        }
        if self.in_drift {
            Verdict::Drift
        } else if psi >= t.psi_warn {
            Verdict::Warning
        } else {
            Verdict::Stable
        }
    }
}

/// Verdict after the last value of a psi history.
pub fn drift_verdict<T: Scalar>(history: &[T], thresholds: Thresholds<T>) -> Verdict {
    let mut tracker = VerdictTracker::new(thresholds);
    history.iter().fold(Verdict::Stable, |_, &p| tracker.push(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(psis: &[f64]) -> Vec<Verdict> {
        let mut t = VerdictTracker::new(Thresholds::default());
        psis.iter().map(|&p| t.push(p)).collect()
    }

    use Verdict::*;

    #[test]
    fn low_psi_is_stable() {
        assert_eq!(run(&[0.05, 0.06]), [Stable, Stable]);
    }

    #[test]
    fn two_breaches_raise_drift_on_second() {
        assert_eq!(run(&[0.25, 0.3]), [Warning, Drift]);
    }

    #[test]
    fn flapping_never_drifts() {
        assert_eq!(run(&[0.25, 0.05, 0.25]), [Warning, Stable, Warning]);
    }

    #[test]
    fn drift_holds_until_two_calm_windows() {
        assert_eq!(
            run(&[0.25, 0.3, 0.15, 0.05, 0.12, 0.05, 0.05, 0.05]),
            [Warning, Drift, Drift, Drift, Drift, Drift, Stable, Stable]
        );
    }

    #[test]
    fn fold_matches_last() {
        assert_eq!(drift_verdict(&[0.25, 0.3], Thresholds::default()), Drift);
        assert_eq!(drift_verdict::<f64>(&[], Thresholds::default()), Stable);
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::<f64>::default().validate().is_ok());
        let bad = Thresholds { psi_warn: 0.3, psi_drift: 0.2, consecutive_required: 2 };
        assert!(bad.validate().is_err());
        let zero = Thresholds { consecutive_required: 0, ..Thresholds::<f64>::default() };
        assert!(zero.validate().is_err());
    }
}
