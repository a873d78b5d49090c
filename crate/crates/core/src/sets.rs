//! Axis-aligned boxes, the common set representation of the crate.
//!
//! Parameter priors, confidence regions, state/control constraints and
//! disturbance bounds are all boxes; that choice is closed under the
//! intersections performed by the estimator and makes interval and polytopic
//! hulls cheap to compute.

use nalgebra::DVector;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("box bounds have mismatched dimensions ({lo} vs {hi})")]
    DimensionMismatch { lo: usize, hi: usize },
    #[error("box is empty or non-finite at component {index} (lo={lo}, hi={hi})")]
    EmptyInterval { index: usize, lo: f64, hi: f64 },
}

/// Nonempty axis-aligned box `{ x : lo ≤ x ≤ hi }`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl IntervalBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self, SetError> {
        if lo.len() != hi.len() {
            return Err(SetError::DimensionMismatch {
                lo: lo.len(),
                hi: hi.len(),
            });
        }
        for i in 0..lo.len() {
            if !(lo[i] <= hi[i]) || !lo[i].is_finite() || !hi[i].is_finite() {
                return Err(SetError::EmptyInterval {
                    index: i,
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        Ok(Self { lo, hi })
    }

    /// Box `[-bound, bound]` from a componentwise magnitude vector.
    pub fn symmetric(bound: &DVector<f64>) -> Result<Self, SetError> {
        Self::new(-bound.clone(), bound.clone())
    }

    pub fn scalar(lo: f64, hi: f64) -> Result<Self, SetError> {
        Self::new(DVector::from_element(1, lo), DVector::from_element(1, hi))
    }

    /// Degenerate box `{x}`.
    pub fn point(x: DVector<f64>) -> Self {
        Self { lo: x.clone(), hi: x }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    /// Componentwise half-widths.
    pub fn radii(&self) -> DVector<f64> {
        (&self.hi - &self.lo) * 0.5
    }

    pub fn widths(&self) -> DVector<f64> {
        &self.hi - &self.lo
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.contains_with_tol(x, 0.0)
    }

    pub fn contains_with_tol(&self, x: &DVector<f64>, tol: f64) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        (0..self.dim()).all(|i| self.lo[i] - tol <= x[i] && x[i] <= self.hi[i] + tol)
    }

    pub fn is_subset_of(&self, other: &IntervalBox) -> bool {
        debug_assert_eq!(self.dim(), other.dim());
        (0..self.dim()).all(|i| other.lo[i] <= self.lo[i] && self.hi[i] <= other.hi[i])
    }

    /// Largest violation of `x ∈ self` (0 when inside).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            worst = worst.max(self.lo[i] - x[i]).max(x[i] - self.hi[i]);
        }
        worst
    }

    /// `self ∩ other`, or `None` when the intersection is empty.
    pub fn intersect(&self, other: &IntervalBox) -> Option<IntervalBox> {
        debug_assert_eq!(self.dim(), other.dim());
        let lo = self.lo.zip_map(&other.lo, f64::max);
        let hi = self.hi.zip_map(&other.hi, f64::min);
        IntervalBox::new(lo, hi).ok()
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| x[i].clamp(self.lo[i], self.hi[i]))
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.lo[i] == self.hi[i] {
                self.lo[i]
            } else {
                rng.gen_range(self.lo[i]..=self.hi[i])
            }
        })
    }

    /// The `2^d` corner points, in lexicographic sign order (lo first).
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let d = self.dim();
        assert!(d <= 24, "vertex enumeration of a {d}-dimensional box");
        (0..1usize << d)
            .map(|mask| {
                DVector::from_fn(d, |i, _| {
                    if mask >> i & 1 == 1 {
                        self.hi[i]
                    } else {
                        self.lo[i]
                    }
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn rejects_inverted_bounds() {
        assert!(IntervalBox::new(dvector![1.0], dvector![0.0]).is_err());
        assert!(IntervalBox::new(dvector![0.0, 0.0], dvector![1.0]).is_err());
        assert!(IntervalBox::new(dvector![f64::NAN], dvector![1.0]).is_err());
    }

    #[test]
    fn intersect_and_membership() {
        let a = IntervalBox::scalar(1.0, 2.0).unwrap();
        let b = IntervalBox::scalar(1.5, 3.0).unwrap();
        let c = a.intersect(&b).unwrap();
        assert_eq!(c.lo()[0], 1.5);
        assert_eq!(c.hi()[0], 2.0);
        assert!(c.is_subset_of(&a));
        assert!(a.intersect(&IntervalBox::scalar(2.5, 3.0).unwrap()).is_none());
        assert!(a.contains(&dvector![1.0]));
        assert!(!a.contains(&dvector![2.0 + 1e-9]));
        assert!(a.contains_with_tol(&dvector![2.0 + 1e-9], 1e-8));
    }

    #[test]
    fn vertices_enumerate_corners() {
        let b = IntervalBox::new(dvector![0.0, -1.0], dvector![1.0, 1.0]).unwrap();
        let vs = b.vertices();
        assert_eq!(vs.len(), 4);
        assert_eq!(vs[0], dvector![0.0, -1.0]);
        assert_eq!(vs[3], dvector![1.0, 1.0]);
    }

    #[test]
    fn sampling_stays_inside() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = IntervalBox::new(dvector![-2.0, 0.0], dvector![-1.0, 0.0]).unwrap();
        for _ in 0..100 {
            assert!(b.contains(&b.sample_uniform(&mut rng)));
        }
    }
}
