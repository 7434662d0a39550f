use serde::{Deserialize, Serialize};

use super::{cast, DriftError, Scalar};

/// `bins` equal-width bins over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec<T> {
    pub lo: T,
    pub hi: T,
    pub bins: usize,
}

impl<T: Scalar> BinSpec<T> {
    pub fn edges(&self) -> Result<Vec<T>, DriftError> {
        if self.bins == 0 {
            return Err(DriftError::BadEdges("need at least one bin".into()));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(DriftError::BadEdges(format!("range [{}, {}]", self.lo, self.hi)));
        }
        let n = T::from_usize(self.bins).expect("bin count fits");
        let width = (self.hi - self.lo) / n;
        let mut edges: Vec<T> = (0..self.bins)
            .map(|i| self.lo + width * T::from_usize(i).expect("index fits"))
            .collect();
        edges.push(self.hi);
        Ok(edges)
    }

    /// Range spanning the finite values of a reference sample. A constant
    /// sample gets a unit-wide range around its value.
    pub fn covering(values: &[T], bins: usize) -> Result<Self, DriftError> {
        let mut it = values.iter().copied().filter(|x| x.is_finite());
        let first = it.next().ok_or(DriftError::EmptySample)?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
        let (lo, hi) = if lo < hi {
            (lo, hi)
        } else {
            (lo - cast(0.5), hi + cast(0.5))
        };
        Ok(BinSpec { lo, hi, bins })
    }
}

/// Fixed-edge histogram. Bin `i` covers `[edges[i], edges[i+1])`; values
/// outside the range are counted in the first or last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram<T> {
    edges: Vec<T>,
    counts: Vec<u64>,
}

impl<T: Scalar> Histogram<T> {
    pub fn new(edges: Vec<T>) -> Result<Self, DriftError> {
        if edges.len() < 2 {
            return Err(DriftError::BadEdges("need at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(DriftError::BadEdges("edges must be finite".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DriftError::BadEdges("edges must be strictly increasing".into()));
        }
        let counts = vec![0; edges.len() - 1];
        Ok(Histogram { edges, counts })
    }

    pub fn from_spec(spec: &BinSpec<T>) -> Result<Self, DriftError> {
        Self::new(spec.edges()?)
    }

    /// Build directly from counts, for tests and fixtures.
    pub fn with_counts(edges: Vec<T>, counts: Vec<u64>) -> Result<Self, DriftError> {
        let mut h = Self::new(edges)?;
        if counts.len() != h.counts.len() {
            return Err(DriftError::BadEdges(format!(
                "{} counts for {} bins",
                counts.len(),
                h.counts.len()
            )));
        }
        h.counts = counts;
        Ok(h)
    }

    pub fn bin_of(&self, x: T) -> usize {
        let last = self.counts.len() - 1;
        self.edges.partition_point(|e| *e <= x).saturating_sub(1).min(last)
    }

    /// Count a finite value. Returns false (and counts nothing) otherwise.
    pub fn add(&mut self, x: T) -> bool {
        if !x.is_finite() {
            return false;
        }
        let i = self.bin_of(x);
        self.counts[i] += 1;
        true
    }

    pub fn merge(&mut self, other: &Histogram<T>) -> Result<(), DriftError> {
        if self.edges != other.edges {
            return Err(DriftError::EdgeMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn edges(&self) -> &[T] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin centres paired with the fraction of observations in each bin.
    pub fn density(&self) -> Vec<(T, T)> {
        let total = self.total();
        let two = cast::<T>(2.0);
        self.edges
            .windows(2)
            .zip(&self.counts)
            .map(|(w, &c)| {
                let frac = if total == 0 {
                    T::zero()
                } else {
                    T::from_u64(c).expect("count fits") / T::from_u64(total).expect("count fits")
                };
                ((w[0] + w[1]) / two, frac)
            })
            .collect()
    }
}
