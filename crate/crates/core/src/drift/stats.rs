use serde::{Deserialize, Serialize};

use super::{cast, DriftError, Histogram, Scalar};

/// Mass given to an empty bin before renormalizing.
pub const PSI_EPSILON: f64 = 1e-6;

fn proportions<T: Scalar>(h: &Histogram<T>) -> Result<Vec<T>, DriftError> {
    let total = h.total();
    if total == 0 {
        return Err(DriftError::EmptyHistogram);
    }
    let n = T::from_u64(total).expect("count fits");
    let eps = cast::<T>(PSI_EPSILON);
    let raw: Vec<T> = h
        .counts()
        .iter()
        .map(|&c| if c == 0 { eps } else { T::from_u64(c).expect("count fits") / n })
        .collect();
    let sum = raw.iter().fold(T::zero(), |a, &b| a + b);
    Ok(raw.into_iter().map(|p| p / sum).collect())
}

/// Population stability index `sum (p - q) ln(p / q)` over shared bins.
pub fn psi<T: Scalar>(reference: &Histogram<T>, current: &Histogram<T>) -> Result<T, DriftError> {
    if reference.edges() != current.edges() {
        return Err(DriftError::EdgeMismatch);
    }
    let p = proportions(reference)?;
    let q = proportions(current)?;
    let s = p
        .iter()
        .zip(&q)
        .map(|(&p, &q)| (p - q) * (p / q).ln())
        .fold(T::zero(), |a, b| a + b);
    // Each term is non-negative; clear any rounding below zero.
    Ok(s.max(T::zero()))
}

fn sorted<T: Scalar>(xs: &[T]) -> Result<Vec<T>, DriftError> {
    if xs.is_empty() {
        return Err(DriftError::EmptySample);
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(DriftError::NonFinite);
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(v)
}

/// Two-sample Kolmogorov-Smirnov statistic, exact over the pooled sample
/// points. Ties are stepped over together.
pub fn ks_statistic<T: Scalar>(a: &[T], b: &[T]) -> Result<T, DriftError> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    // max |i/n - j/m| kept as the integer |i*m - j*n| to avoid rounding.
    let mut best: u128 = 0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        best = best.max((i as u128 * m).abs_diff(j as u128 * n));
    }
    let d = T::from_u128(best).expect("fits") / T::from_u128(n * m).expect("fits");
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport<T> {
    pub thresholds: Vec<T>,
    pub fraction_exceeding: Vec<T>,
    pub n: usize,
}

/// Fraction of paired scores whose absolute difference is strictly above
/// each threshold.
pub fn simulate_impact<T: Scalar>(
    baseline: &[T],
    drifted: &[T],
    thresholds: &[T],
) -> Result<ImpactReport<T>, DriftError> {
    if baseline.len() != drifted.len() {
        return Err(DriftError::LengthMismatch(baseline.len(), drifted.len()));
    }
    if baseline.is_empty() {
        return Err(DriftError::EmptySample);
    }
    if baseline.iter().chain(drifted).chain(thresholds).any(|x| !x.is_finite()) {
        return Err(DriftError::NonFinite);
    }
    let mut deltas: Vec<T> = baseline.iter().zip(drifted).map(|(a, b)| (*a - *b).abs()).collect();
    deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = T::from_usize(deltas.len()).expect("fits");
    let fraction_exceeding = thresholds
        .iter()
        .map(|&t| {
            let above = deltas.len() - deltas.partition_point(|d| *d <= t);
            T::from_usize(above).expect("fits") / n
        })
        .collect();
    Ok(ImpactReport {
        thresholds: thresholds.to_vec(),
        fraction_exceeding,
        n: deltas.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bins(a: u64, b: u64) -> Histogram<f64> {
        Histogram::with_counts(vec![0.0, 1.0, 2.0], vec![a, b]).unwrap()
    }

    #[test]
    fn psi_identical_is_zero() {
        assert_eq!(psi(&two_bins(3, 7), &two_bins(3, 7)).unwrap(), 0.0);
    }

    #[test]
    fn psi_half_half_vs_quarter() {
        // 0.25 * ln 3, from an independent calculator.
        let v = psi(&two_bins(2, 2), &two_bins(1, 3)).unwrap();
        assert!((v - 0.274_653_072_167_027_45).abs() < 1e-12, "{v}");
    }

    #[test]
    fn psi_disjoint_support_is_finite() {
        let v: f64 = psi(&two_bins(1, 0), &two_bins(0, 1)).unwrap();
        assert!((v - 27.630_965_853_941_58).abs() < 1e-9, "{v}");
    }

    #[test]
    fn psi_four_bins_fixture() {
        let e: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let a = Histogram::with_counts(e.clone(), vec![10, 0, 5, 5]).unwrap();
        let b = Histogram::with_counts(e, vec![4, 4, 4, 8]).unwrap();
        let v: f64 = psi(&a, &b).unwrap();
        assert!((v - 2.797_746_868_130_462_7).abs() < 1e-9, "{v}");
    }

    #[test]
    fn psi_errors() {
        let other = Histogram::with_counts(vec![0.0, 1.0, 3.0], vec![1, 1]).unwrap();
        assert_eq!(psi(&two_bins(1, 1), &other), Err(DriftError::EdgeMismatch));
        assert_eq!(psi(&two_bins(0, 0), &two_bins(1, 1)), Err(DriftError::EmptyHistogram));
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(ks_statistic(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(ks_statistic(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 1.0 / 3.0);
        assert_eq!(ks_statistic::<f64>(&[], &[1.0]), Err(DriftError::EmptySample));
    }

    #[test]
    fn impact_counts_strict_exceedance() {
        let base = [0.0, 0.0, 0.0];
        let drifted = [0.0005, 0.002, 0.02];
        let r = simulate_impact(&base, &drifted, &[0.001, 0.01]).unwrap();
        assert_eq!(r.fraction_exceeding, [2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(r.n, 3);
        let same = simulate_impact(&drifted, &drifted, &[0.0, 0.5]).unwrap();
        assert_eq!(same.fraction_exceeding, [0.0, 0.0]);
        assert_eq!(
            simulate_impact(&base, &drifted[..2], &[0.1]),
            Err(DriftError::LengthMismatch(3, 2))
        );
    }
}
