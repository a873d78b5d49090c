//! Piecewise-constant signals and lower/upper envelope pairs.
//!
//! Disturbances and measurement noise are represented as piecewise-constant
//! functions of time so that envelope membership is checkable pointwise on
//! the integration grid.

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("breakpoints must be strictly increasing (index {0})")]
    UnorderedBreakpoints(usize),
    #[error("need one value per breakpoint ({times} breakpoints, {values} values)")]
    LengthMismatch { times: usize, values: usize },
    #[error("signal values have inconsistent dimensions")]
    DimensionMismatch,
    #[error("envelope violates lo ≤ hi at t={0}")]
    Crossing(f64),
    #[error("signal has no segments")]
    Empty,
}

/// Right-continuous piecewise-constant vector signal.
///
/// `values[i]` holds on `[times[i], times[i+1])`; the last value extends to
/// `+∞` and the first extends to `-∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl PiecewiseConstant {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self, SignalError> {
        if values.is_empty() {
            return Err(SignalError::Empty);
        }
        if times.len() != values.len() {
            return Err(SignalError::LengthMismatch {
                times: times.len(),
                values: values.len(),
            });
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) {
                return Err(SignalError::UnorderedBreakpoints(i));
            }
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(SignalError::DimensionMismatch);
        }
        Ok(Self { times, values })
    }

    pub fn constant(value: DVector<f64>) -> Self {
        Self {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.times
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, &DVector<f64>)> {
        self.times.iter().copied().zip(self.values.iter())
    }

    pub fn eval(&self, t: f64) -> &DVector<f64> {
        // partition_point returns the number of breakpoints ≤ t.
        let idx = self.times.partition_point(|&bp| bp <= t);
        &self.values[idx.saturating_sub(1)]
    }

    /// Componentwise `sup_t |s(t)|` over all segments.
    pub fn magnitude_bound(&self) -> DVector<f64> {
        let mut bound = DVector::<f64>::zeros(self.dim());
        for v in &self.values {
            for i in 0..bound.len() {
                bound[i] = bound[i].max(v[i].abs());
            }
        }
        bound
    }

    /// True when every component is non-increasing across segments.
    pub fn is_nonincreasing(&self) -> bool {
        self.values
            .windows(2)
            .all(|w| (0..w[0].len()).all(|i| w[1][i] <= w[0][i] + 1e-12))
    }
}

/// Guaranteed bounds `lo(t) ≤ s(t) ≤ hi(t)` on an unknown signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub lo: PiecewiseConstant,
    pub hi: PiecewiseConstant,
}

impl Envelope {
    pub fn new(lo: PiecewiseConstant, hi: PiecewiseConstant) -> Result<Self, SignalError> {
        if lo.dim() != hi.dim() {
            return Err(SignalError::DimensionMismatch);
        }
        for &t in lo.breakpoints().iter().chain(hi.breakpoints()) {
            let (l, h) = (lo.eval(t), hi.eval(t));
            if (0..l.len()).any(|i| l[i] > h[i]) {
                return Err(SignalError::Crossing(t));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn constant(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self, SignalError> {
        Self::new(PiecewiseConstant::constant(lo), PiecewiseConstant::constant(hi))
    }

    /// Symmetric envelope `[-mag, mag]`.
    pub fn symmetric(mag: DVector<f64>) -> Self {
        Self {
            lo: PiecewiseConstant::constant(-mag.clone()),
            hi: PiecewiseConstant::constant(mag),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::symmetric(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    pub fn lo_at(&self, t: f64) -> &DVector<f64> {
        self.lo.eval(t)
    }

    pub fn hi_at(&self, t: f64) -> &DVector<f64> {
        self.hi.eval(t)
    }

    pub fn contains(&self, t: f64, v: &DVector<f64>) -> bool {
        let (l, h) = (self.lo.eval(t), self.hi.eval(t));
        (0..v.len()).all(|i| l[i] <= v[i] && v[i] <= h[i])
    }

    /// Componentwise `sup_t max(|lo|, |hi|)`.
    pub fn magnitude_bound(&self) -> DVector<f64> {
        let (a, b) = (self.lo.magnitude_bound(), self.hi.magnitude_bound());
        a.zip_map(&b, f64::max)
    }

    /// Draw a value uniformly inside the envelope at time `t`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, t: f64, rng: &mut R) -> DVector<f64> {
        let (l, h) = (self.lo.eval(t), self.hi.eval(t));
        DVector::from_fn(self.dim(), |i, _| {
            if l[i] == h[i] {
                l[i]
            } else {
                rng.gen_range(l[i]..=h[i])
            }
        })
    }

    /// Stack two envelopes into one of dimension `self.dim() + other.dim()`.
    pub fn stack(&self, other: &Envelope) -> Envelope {
        let cat = |a: &PiecewiseConstant, b: &PiecewiseConstant| {
            let mut times: Vec<f64> = a
                .breakpoints()
                .iter()
                .chain(b.breakpoints())
                .copied()
                .collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let values = times
                .iter()
                .map(|&t| {
                    let (va, vb) = (a.eval(t), b.eval(t));
                    DVector::from_iterator(va.len() + vb.len(), va.iter().chain(vb.iter()).copied())
                })
                .collect();
            PiecewiseConstant::new(times, values).expect("stacked signal is well-formed")
        };
        Envelope {
            lo: cat(&self.lo, &other.lo),
            hi: cat(&self.hi, &other.hi),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn eval_selects_segment() {
        let s = PiecewiseConstant::new(
            vec![0.0, 1.0, 2.0],
            vec![dvector![1.0], dvector![2.0], dvector![3.0]],
        )
        .unwrap();
        assert_eq!(s.eval(-5.0)[0], 1.0);
        assert_eq!(s.eval(0.5)[0], 1.0);
        assert_eq!(s.eval(1.0)[0], 2.0);
        assert_eq!(s.eval(1.999)[0], 2.0);
        assert_eq!(s.eval(10.0)[0], 3.0);
    }

    #[test]
    fn envelope_rejects_crossing() {
        let lo = PiecewiseConstant::constant(dvector![1.0]);
        let hi = PiecewiseConstant::constant(dvector![0.0]);
        assert!(Envelope::new(lo, hi).is_err());
    }

    #[test]
    fn magnitude_and_monotonicity() {
        let env = Envelope::constant(dvector![-0.05], dvector![0.03]).unwrap();
        assert_eq!(env.magnitude_bound()[0], 0.05);
        assert!(env.hi.is_nonincreasing());
        let growing = PiecewiseConstant::new(vec![0.0, 1.0], vec![dvector![0.0], dvector![1.0]]).unwrap();
        assert!(!growing.is_nonincreasing());
    }

    #[test]
    fn stack_concatenates_components() {
        let a = Envelope::constant(dvector![-1.0], dvector![1.0]).unwrap();
        let b = Envelope::constant(dvector![-2.0, 0.0], dvector![2.0, 0.5]).unwrap();
        let s = a.stack(&b);
        assert_eq!(s.dim(), 3);
        assert_eq!(s.lo_at(0.0), &dvector![-1.0, -2.0, 0.0]);
        assert_eq!(s.hi_at(0.0), &dvector![1.0, 2.0, 0.5]);
    }
}
