//! Fixed-step fourth-order Runge-Kutta integration.

use nalgebra::DVector;

/// Any state component beyond this magnitude aborts an integration; the naive
/// interval predictor is expected to blow up and must fail cleanly.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

/// One classical RK4 step of `ẋ = f(t, x)`.
pub fn rk4_step<F>(f: F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// True when every component is finite and within [`DIVERGENCE_LIMIT`].
pub fn is_within_limits(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
}

/// Build the uniform grid `t0, t0+h, …` covering `[t0, t0+horizon]`.
///
/// The step count is rounded so the grid lands on the horizon to within
/// floating-point error.
pub fn uniform_grid(t0: f64, horizon: f64, step: f64) -> Vec<f64> {
    let n = (horizon / step).round().max(1.0) as usize;
    (0..=n).map(|k| t0 + k as f64 * step).collect()
}
