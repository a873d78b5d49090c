//! Set-membership parameter estimation.
//!
//! Measurements of the plant are folded into the linear regression
//! `y(t) = Φ(t)θ + η(t)` with `y = y₂ - A_nominal y₁ - Bu` and
//! `Φ = [φ₁y₁ … φ_d y₁]`. A windowed persistence-of-excitation check
//! certifies identifiability, the batch least-squares estimate carries a
//! guaranteed error radius, and the confidence region shrinks by box
//! intersection and never grows.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::{ParametricLinearSystem, SignalBounds};
use crate::prediction::interval_hull;
use crate::sets::IntervalBox;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("stream does not cover a full excitation window of length {ell}")]
    WindowTooShort { ell: f64 },
    #[error(
        "persistence of excitation fails on window [{start:.6}, {end:.6}] (λ_min = {lambda_min:.3e})"
    )]
    PeFailure {
        start: f64,
        end: f64,
        lambda_min: f64,
    },
    #[error("information matrix is numerically singular (condition ≈ {condition:.3e})")]
    Excitation { condition: f64 },
    #[error("{0}")]
    Structure(String),
}

/// Running trapezoid accumulation of the regression stream.
///
/// Stores the per-sample regressors together with prefix integrals of the
/// Gramian `∫ΦᵀΦ` and the moment `∫Φᵀy`, so both full-interval and windowed
/// integrals are O(1) lookups.
#[derive(Debug, Clone)]
pub struct RegressorStream {
    times: Vec<f64>,
    phis: Vec<DMatrix<f64>>,
    ys: Vec<DVector<f64>>,
    cum_gram: Vec<DMatrix<f64>>,
    cum_moment: Vec<DVector<f64>>,
    param_dim: usize,
}

impl RegressorStream {
    pub fn new(param_dim: usize) -> Self {
        Self {
            times: Vec::new(),
            phis: Vec::new(),
            ys: Vec::new(),
            cum_gram: Vec::new(),
            cum_moment: Vec::new(),
            param_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    /// Append a sample; times must be strictly increasing.
    pub fn push(&mut self, t: f64, phi: DMatrix<f64>, y: DVector<f64>) {
        assert_eq!(phi.ncols(), self.param_dim);
        assert_eq!(phi.nrows(), y.len());
        if let Some(&last) = self.times.last() {
            assert!(t > last, "samples must arrive in increasing time order");
        }
        let gram_term = phi.transpose() * &phi;
        let moment_term = phi.transpose() * &y;
        match self.times.last() {
            None => {
                self.cum_gram.push(DMatrix::zeros(self.param_dim, self.param_dim));
                self.cum_moment.push(DVector::zeros(self.param_dim));
            }
            Some(&last) => {
                let h = t - last;
                let prev_gram = self.phis.last().unwrap().transpose() * self.phis.last().unwrap();
                let prev_moment = self.phis.last().unwrap().transpose() * self.ys.last().unwrap();
                let gram = self.cum_gram.last().unwrap() + (prev_gram + &gram_term) * (0.5 * h);
                let moment =
                    self.cum_moment.last().unwrap() + (prev_moment + &moment_term) * (0.5 * h);
                self.cum_gram.push(gram);
                self.cum_moment.push(moment);
            }
        }
        self.times.push(t);
        self.phis.push(phi);
        self.ys.push(y);
    }

    fn index_at(&self, t: f64) -> usize {
        // Last sample index with time ≤ t (up to rounding slack).
        self.times
            .partition_point(|&tk| tk <= t + 1e-12)
            .saturating_sub(1)
    }

    /// Trapezoid `∫ₛᵉ ΦᵀΦ` between the grid points nearest to `s` and `e`.
    pub fn window_gramian(&self, start: f64, end: f64) -> DMatrix<f64> {
        let (i0, i1) = (self.index_at(start), self.index_at(end));
        &self.cum_gram[i1] - &self.cum_gram[i0]
    }

    /// Trapezoid `∫₀ᵗ ΦᵀΦ` (from the first sample).
    pub fn gramian_at(&self, t: f64) -> DMatrix<f64> {
        self.cum_gram[self.index_at(t)].clone()
    }

    /// Trapezoid `∫₀ᵗ Φᵀy`.
    pub fn moment_at(&self, t: f64) -> DVector<f64> {
        self.cum_moment[self.index_at(t)].clone()
    }
}

/// Regression row for one measurement instant:
/// `y = y₂ - A_nominal y₁ - Bu`, `Φ = [φ₁y₁ … φ_d y₁]`.
pub fn build_regression(
    sys: &ParametricLinearSystem,
    y1: &DVector<f64>,
    y2: &DVector<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let y = y2 - sys.a_nominal() * y1 - sys.b() * u;
    let p = sys.state_dim();
    let d = sys.param_dim();
    let mut phi = DMatrix::zeros(p, d);
    for (i, basis) in sys.basis().iter().enumerate() {
        phi.set_column(i, &(basis * y1));
    }
    (y, phi)
}

/// A verified `(ℓ, ϑ)` persistence-of-excitation certificate.
#[derive(Debug, Clone)]
pub struct PeWitness {
    pub ell: f64,
    pub vartheta: f64,
    /// Time range whose windows were inspected.
    pub verified_on: (f64, f64),
}

/// Scan every window of length `ell` (start points spaced by `stride`) and
/// return the largest excitation level valid for all of them.
pub fn check_pe(
    stream: &RegressorStream,
    ell: f64,
    stride: f64,
) -> Result<PeWitness, EstimationError> {
    assert!(ell > 0.0 && stride > 0.0);
    if stream.len() < 2 {
        return Err(EstimationError::WindowTooShort { ell });
    }
    let t0 = stream.times[0];
    let t_end = *stream.times.last().unwrap();
    if t_end - t0 + 1e-12 < ell {
        return Err(EstimationError::WindowTooShort { ell });
    }
    let mut vartheta = f64::INFINITY;
    let mut start = t0;
    let mut last_end = t0;
    while start + ell <= t_end + 1e-9 {
        let end = start + ell;
        let gram = stream.window_gramian(start, end);
        let lambda_min = linalg::lambda_min_symmetric(&gram);
        if lambda_min < 1e-12 {
            return Err(EstimationError::PeFailure {
                start,
                end,
                lambda_min,
            });
        }
        vartheta = vartheta.min(lambda_min);
        last_end = end;
        start += stride;
    }
    Ok(PeWitness {
        ell,
        vartheta,
        verified_on: (t0, last_end),
    })
}

/// Batch least squares `θ̂(t) = G(t)⁻¹ m(t)` for `t ≥ ℓ`; the initial guess
/// is returned before a full excitation window has elapsed.
pub fn least_squares(
    stream: &RegressorStream,
    t: f64,
    ell: f64,
    theta0: &DVector<f64>,
) -> Result<DVector<f64>, EstimationError> {
    if t < ell {
        return Ok(theta0.clone());
    }
    let gram = stream.gramian_at(t);
    let eigs = linalg::symmetric_eigenvalues(&gram);
    let (min_e, max_e) = (eigs[0], eigs[eigs.len() - 1]);
    let condition = if min_e <= 0.0 {
        f64::INFINITY
    } else {
        max_e / min_e
    };
    if !(condition < 1e12) {
        return Err(EstimationError::Excitation { condition });
    }
    let chol = gram
        .cholesky()
        .ok_or(EstimationError::Excitation { condition })?;
    Ok(chol.solve(&stream.moment_at(t)))
}

/// Worst-case magnitudes entering the estimation error radius.
#[derive(Debug, Clone, Copy)]
pub struct NoiseBudget {
    /// Bound on the Euclidean norm of the combined regression perturbation.
    pub eta_bar: f64,
    /// Worst-case `‖x‖∞` (or a running estimate of it).
    pub x_inf_bound: f64,
    /// Bound on the Euclidean norm of `ν₁`.
    pub nu1_inf_bound: f64,
}

impl NoiseBudget {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.eta_bar < 0.0 || self.x_inf_bound < 0.0 || self.nu1_inf_bound < 0.0 {
            return Err(EstimationError::Structure(
                "noise budget fields must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Guaranteed radius `Δθ = (2ℓ/ϑ)·maxᵢ‖φᵢ‖₂·(X + ‖ν₁‖∞)·η̄` of the
/// least-squares error for `t ≥ ℓ`.
pub fn error_bound(
    budget: &NoiseBudget,
    witness: &PeWitness,
    sys: &ParametricLinearSystem,
) -> f64 {
    let max_basis_norm = sys
        .basis()
        .iter()
        .map(linalg::spectral_norm)
        .fold(0.0, f64::max);
    2.0 * witness.ell / witness.vartheta
        * max_basis_norm
        * (budget.x_inf_bound + budget.nu1_inf_bound)
        * budget.eta_bar
}

/// Bound the Euclidean norm of `η = Dω - A(θ)ν₁ + ν₂` over the envelopes and
/// the parameter prior.
pub fn eta_bound_from_envelopes(sys: &ParametricLinearSystem, bounds: &SignalBounds) -> f64 {
    let p = sys.state_dim();
    let omega_mag = bounds.omega.magnitude_bound();
    let nu1_mag = bounds.nu1_magnitude(p);
    let nu2_mag = bounds.nu2_magnitude(p);
    let hull = interval_hull(sys, sys.theta_set());
    let abs_a = hull.lo.zip_map(&hull.hi, |a, b| a.abs().max(b.abs()));
    let abs_d = sys.d().map(f64::abs);
    let per_component = abs_d * omega_mag + abs_a * nu1_mag + nu2_mag;
    per_component.norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    /// Intersection applied; `shrunk` reports whether any width decreased.
    Applied { shrunk: bool },
    /// The new ball does not intersect the region; the region is kept and the
    /// run is flagged (symptom of an under-configured noise bound).
    Inconsistent,
}

/// Shrink-only box of parameter values consistent with all data so far.
#[derive(Debug, Clone)]
pub struct ConfidenceRegion {
    current: IntervalBox,
    theta_hat: DVector<f64>,
    history: Vec<(f64, IntervalBox)>,
    inconsistent: bool,
}

impl ConfidenceRegion {
    pub fn new(prior: IntervalBox, theta0: DVector<f64>) -> Result<Self, EstimationError> {
        if !prior.contains_with_tol(&theta0, 1e-12) {
            return Err(EstimationError::Structure(
                "initial estimate must lie in the prior set".into(),
            ));
        }
        Ok(Self {
            current: prior.clone(),
            theta_hat: theta0,
            history: vec![(0.0, prior)],
            inconsistent: false,
        })
    }

    pub fn current(&self) -> &IntervalBox {
        &self.current
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    pub fn history(&self) -> &[(f64, IntervalBox)] {
        &self.history
    }

    pub fn inconsistent(&self) -> bool {
        self.inconsistent
    }

    /// Intersect with the ball `{θ̃ : |θ̂ - θ̃| ≤ Δθ componentwise}`.
    ///
    /// The stored point estimate is the projection of `theta_hat` onto the
    /// updated region, so it always lies inside.
    pub fn update(&mut self, t: f64, theta_hat: &DVector<f64>, delta: f64) -> UpdateOutcome {
        assert!(delta >= 0.0, "error radius must be nonnegative");
        let radius = DVector::from_element(theta_hat.len(), delta);
        let ball = IntervalBox::new(theta_hat - &radius, theta_hat + &radius)
            .expect("ball bounds are ordered");
        match self.current.intersect(&ball) {
            Some(inter) => {
                let shrunk = inter != self.current;
                self.current = inter;
                self.theta_hat = self.current.clamp(theta_hat);
                self.history.push((t, self.current.clone()));
                UpdateOutcome::Applied { shrunk }
            }
            None => {
                self.inconsistent = true;
                UpdateOutcome::Inconsistent
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_system() -> ParametricLinearSystem {
        ParametricLinearSystem::new(
            dmatrix![0.0],
            vec![dmatrix![-1.0]],
            DMatrix::zeros(1, 1),
            dmatrix![1.0],
            IntervalBox::scalar(1.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn regression_rows() {
        let sys = scalar_system();
        // Zero regressor when y₁ = 0.
        let (y, phi) = build_regression(&sys, &dvector![0.0], &dvector![-3.0], &dvector![0.0]);
        assert_eq!(phi[(0, 0)], 0.0);
        assert_eq!(y[0], -3.0);
        // Hand substitution: y₁ = 2 gives Φ = -2.
        let (y, phi) = build_regression(&sys, &dvector![2.0], &dvector![-3.0], &dvector![0.0]);
        assert_eq!(y[0], -3.0);
        assert_eq!(phi[(0, 0)], -2.0);
        // Noiseless data satisfies y = Φθ exactly.
        let theta = 1.5;
        let x = 0.8;
        let xdot = -theta * x;
        let (y, phi) = build_regression(&sys, &dvector![x], &dvector![xdot], &dvector![0.0]);
        assert!((y[0] - phi[(0, 0)] * theta).abs() < 1e-15);
    }

    fn stream_from(f: impl Fn(f64) -> DMatrix<f64>, y: impl Fn(f64) -> DVector<f64>, t_end: f64, h: f64, d: usize) -> RegressorStream {
        let mut s = RegressorStream::new(d);
        let n = (t_end / h).round() as usize;
        for k in 0..=n {
            let t = k as f64 * h;
            s.push(t, f(t), y(t));
        }
        s
    }

    #[test]
    fn pe_of_identity_regressor() {
        // Φ = I_d constant → every window integral is ℓ·I → ϑ = ℓ.
        let s = stream_from(
            |_| DMatrix::identity(2, 2),
            |_| DVector::zeros(2),
            3.0,
            1e-3,
            2,
        );
        let w = check_pe(&s, 1.0, 0.25).unwrap();
        assert!((w.vartheta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pe_fails_on_zero_regressor() {
        let s = stream_from(|_| DMatrix::zeros(1, 1), |_| DVector::zeros(1), 2.0, 1e-3, 1);
        assert!(matches!(
            check_pe(&s, 1.0, 0.5),
            Err(EstimationError::PeFailure { .. })
        ));
    }

    #[test]
    fn pe_of_sin_cos_row() {
        // Φ(t) = [sin t, cos t] over a full period: ∫ΦᵀΦ = diag(π, π).
        let ell = 2.0 * std::f64::consts::PI;
        let s = stream_from(
            |t| DMatrix::from_row_slice(1, 2, &[t.sin(), t.cos()]),
            |_| DVector::zeros(1),
            3.0 * ell,
            1e-3,
            2,
        );
        // Window endpoints truncate to the sample grid (a sound, conservative
        // bias), so the quadrature error is of order of the grid step.
        let w = check_pe(&s, ell, ell / 4.0).unwrap();
        assert!(
            (w.vartheta - std::f64::consts::PI).abs() < 5e-3,
            "ϑ = {}",
            w.vartheta
        );
        assert!(w.vartheta <= std::f64::consts::PI + 1e-9);
    }

    #[test]
    fn pe_requires_one_window() {
        let s = stream_from(|_| DMatrix::identity(1, 1), |_| DVector::zeros(1), 0.5, 1e-2, 1);
        assert!(matches!(
            check_pe(&s, 1.0, 0.1),
            Err(EstimationError::WindowTooShort { .. })
        ));
    }

    #[test]
    fn least_squares_returns_prior_before_window() {
        let s = stream_from(|_| DMatrix::identity(1, 1), |_| DVector::zeros(1), 2.0, 1e-2, 1);
        let th = least_squares(&s, 0.5, 1.0, &dvector![1.25]).unwrap();
        assert_eq!(th[0], 1.25);
    }

    #[test]
    fn least_squares_exact_on_noiseless_data() {
        // ẋ = -1.5x from x0=1: Φ = -x, y = -θ·(-x)·... = Φθ exactly.
        let theta = 1.5;
        let x = |t: f64| (-theta * t).exp();
        let s = stream_from(
            |t| DMatrix::from_element(1, 1, -x(t)),
            |t| DVector::from_element(1, -x(t) * theta),
            2.0,
            1e-3,
            1,
        );
        for t in [1.0, 1.5, 2.0] {
            let th = least_squares(&s, t, 1.0, &dvector![1.0]).unwrap();
            assert!((th[0] - theta).abs() < 1e-8, "t={t}: {}", th[0]);
        }
    }

    #[test]
    fn least_squares_bias_matches_quadrature_oracle() {
        // With constant η: θ̂ - θ = (∫Φη)/(∫Φ²); cross-check by direct sums.
        let theta = 1.5;
        let eta = 0.03;
        let x = |t: f64| (-theta * t).exp() + 0.2;
        let s = stream_from(
            |t| DMatrix::from_element(1, 1, -x(t)),
            |t| DVector::from_element(1, -x(t) * theta + eta),
            3.0,
            1e-3,
            1,
        );
        let t_query = 3.0;
        let th = least_squares(&s, t_query, 1.0, &dvector![1.0]).unwrap();

        // Independent trapezoid quadrature over the same grid.
        let h = 1e-3;
        let n = (t_query / h).round() as usize;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..n {
            let (t0, t1) = (k as f64 * h, (k + 1) as f64 * h);
            let f0 = -x(t0) * eta;
            let f1 = -x(t1) * eta;
            num += 0.5 * h * (f0 + f1);
            den += 0.5 * h * (x(t0).powi(2) + x(t1).powi(2));
        }
        let predicted_bias = num / den;
        assert!(((th[0] - theta) - predicted_bias).abs() < 1e-10);
    }

    #[test]
    fn least_squares_rejects_singular_gramian() {
        let s = stream_from(|_| DMatrix::zeros(1, 1), |_| DVector::zeros(1), 2.0, 1e-2, 1);
        assert!(matches!(
            least_squares(&s, 1.5, 1.0, &dvector![1.0]),
            Err(EstimationError::Excitation { .. })
        ));
    }

    #[test]
    fn error_bound_formula() {
        let sys = scalar_system();
        let witness = PeWitness {
            ell: 1.0,
            vartheta: 1.0,
            verified_on: (0.0, 2.0),
        };
        // No perturbation → zero radius.
        let b0 = NoiseBudget {
            eta_bar: 0.0,
            x_inf_bound: 1.0,
            nu1_inf_bound: 0.0,
        };
        assert_eq!(error_bound(&b0, &witness, &sys), 0.0);
        // Plug-in: (2·1/1)·1·(1+0)·0.1 = 0.2.
        let b = NoiseBudget {
            eta_bar: 0.1,
            x_inf_bound: 1.0,
            nu1_inf_bound: 0.0,
        };
        assert!((error_bound(&b, &witness, &sys) - 0.2).abs() < 1e-15);
        // Doubling ℓ at fixed ϑ doubles the radius.
        let w2 = PeWitness {
            ell: 2.0,
            ..witness.clone()
        };
        assert!((error_bound(&b, &w2, &sys) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn confidence_region_shrinks_by_intersection() {
        let prior = IntervalBox::scalar(1.0, 2.0).unwrap();
        let mut region = ConfidenceRegion::new(prior, dvector![1.5]).unwrap();

        let out = region.update(1.0, &dvector![1.5], 0.2);
        assert_eq!(out, UpdateOutcome::Applied { shrunk: true });
        assert!((region.current().lo()[0] - 1.3).abs() < 1e-15);
        assert!((region.current().hi()[0] - 1.7).abs() < 1e-15);

        // Second update intersects with the previous box (shrink-only).
        region.update(2.0, &dvector![1.6], 0.2);
        assert!((region.current().lo()[0] - 1.4).abs() < 1e-15);
        assert!((region.current().hi()[0] - 1.7).abs() < 1e-15);

        // A radius covering the whole set leaves the region unchanged.
        let before = region.current().clone();
        let out = region.update(3.0, &dvector![1.5], 10.0);
        assert_eq!(out, UpdateOutcome::Applied { shrunk: false });
        assert_eq!(*region.current(), before);

        // Widths never increase along the history.
        for pair in region.history().windows(2) {
            assert!(pair[1].1.widths()[0] <= pair[0].1.widths()[0] + 1e-15);
        }
    }

    #[test]
    fn empty_intersection_flags_inconsistency() {
        let prior = IntervalBox::scalar(1.0, 2.0).unwrap();
        let mut region = ConfidenceRegion::new(prior, dvector![1.5]).unwrap();
        region.update(1.0, &dvector![1.2], 0.05);
        let out = region.update(2.0, &dvector![1.9], 0.05);
        assert_eq!(out, UpdateOutcome::Inconsistent);
        assert!(region.inconsistent());
        // Region is preserved, never emptied.
        assert!((region.current().lo()[0] - 1.15).abs() < 1e-15);
        assert!((region.current().hi()[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn estimate_stays_inside_region_after_clamping() {
        let prior = IntervalBox::scalar(1.0, 2.0).unwrap();
        let mut region = ConfidenceRegion::new(prior, dvector![1.5]).unwrap();
        region.update(1.0, &dvector![1.4], 0.1);
        region.update(2.0, &dvector![1.55], 0.1);
        assert!(region.current().contains(region.theta_hat()));
    }

    #[test]
    fn eta_bound_covers_fig_style_envelopes() {
        let sys = scalar_system();
        let bounds = SignalBounds {
            omega: crate::signal::Envelope::symmetric(dvector![0.05]),
            nu: crate::signal::Envelope::symmetric(dvector![0.01, 0.02]),
            x0_lo: dvector![-0.1],
            x0_hi: dvector![0.1],
        };
        // |D|ω + max|A(θ)|ν₁ + ν₂ = 0.05 + 2·0.01 + 0.02 = 0.09.
        let eta = eta_bound_from_envelopes(&sys, &bounds);
        assert!((eta - 0.09).abs() < 1e-12);
    }
}
