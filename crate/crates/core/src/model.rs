//! The uncertain plant `ẋ = A(θ)x + Bu + Dω` with noisy measurements of the
//! state and its derivative.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ode;
use crate::sets::IntervalBox;
use crate::signal::Envelope;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Structure(String),
    #[error("parameter vector lies outside the admissible set Θ")]
    ParameterOutsideDomain,
    #[error("state diverged (component beyond {limit:.0e}) at t={t_last}")]
    Divergence { t_last: f64, limit: f64 },
    #[error("invalid simulation grid: step={step}, horizon={horizon}")]
    BadGrid { step: f64, horizon: f64 },
}

/// Linear plant with the parameter-affine state matrix
/// `A(θ) = A_nominal + Σᵢ θᵢ φᵢ`, `θ ∈ Θ`.
#[derive(Debug, Clone)]
pub struct ParametricLinearSystem {
    a_nominal: DMatrix<f64>,
    basis: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    theta_set: IntervalBox,
}

impl ParametricLinearSystem {
    pub fn new(
        a_nominal: DMatrix<f64>,
        basis: Vec<DMatrix<f64>>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        theta_set: IntervalBox,
    ) -> Result<Self, ModelError> {
        let p = a_nominal.nrows();
        if a_nominal.ncols() != p {
            return Err(ModelError::Structure("A_nominal must be square".into()));
        }
        if basis.iter().any(|phi| phi.shape() != (p, p)) {
            return Err(ModelError::Structure(format!(
                "every basis matrix must be {p}x{p}"
            )));
        }
        if b.nrows() != p {
            return Err(ModelError::Structure("B row count must match A".into()));
        }
        if d.nrows() != p {
            return Err(ModelError::Structure("D row count must match A".into()));
        }
        if theta_set.dim() != basis.len() {
            return Err(ModelError::Structure(format!(
                "Θ dimension {} does not match {} basis matrices",
                theta_set.dim(),
                basis.len()
            )));
        }
        Ok(Self {
            a_nominal,
            basis,
            b,
            d,
            theta_set,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a_nominal.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn param_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn a_nominal(&self) -> &DMatrix<f64> {
        &self.a_nominal
    }

    pub fn basis(&self) -> &[DMatrix<f64>] {
        &self.basis
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn theta_set(&self) -> &IntervalBox {
        &self.theta_set
    }

    /// `A(θ)`, rejecting parameters outside `Θ`.
    pub fn state_matrix(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        if theta.len() != self.param_dim() {
            return Err(ModelError::Structure(format!(
                "theta has {} components, expected {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if !self.theta_set.contains_with_tol(theta, 1e-12) {
            return Err(ModelError::ParameterOutsideDomain);
        }
        Ok(self.state_matrix_unchecked(theta))
    }

    /// `A(θ)` without the domain check (for set centers and hull arithmetic).
    pub fn state_matrix_unchecked(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.a_nominal.clone();
        for (i, phi) in self.basis.iter().enumerate() {
            a += phi * theta[i];
        }
        a
    }

    /// Replace the nominal matrix (used to fold preliminary feedback into the
    /// plant family).
    pub fn with_a_nominal(&self, a_nominal: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::new(
            a_nominal,
            self.basis.clone(),
            self.b.clone(),
            self.d.clone(),
            self.theta_set.clone(),
        )
    }

    /// Replace the disturbance matrix (used to append disturbance channels).
    pub fn with_d(&self, d: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::new(
            self.a_nominal.clone(),
            self.basis.clone(),
            self.b.clone(),
            d,
            self.theta_set.clone(),
        )
    }
}

/// Assumption-style bounds on the disturbance, the measurement noise and the
/// initial state.
#[derive(Debug, Clone)]
pub struct SignalBounds {
    /// Envelope on `ω(t)`, dimension r.
    pub omega: Envelope,
    /// Envelope on `ν(t) = (ν₁, ν₂)`, dimension 2p.
    pub nu: Envelope,
    pub x0_lo: DVector<f64>,
    pub x0_hi: DVector<f64>,
}

impl SignalBounds {
    pub fn validate(&self, sys: &ParametricLinearSystem) -> Result<(), ModelError> {
        let p = sys.state_dim();
        if self.omega.dim() != sys.disturbance_dim() {
            return Err(ModelError::Structure("ω envelope dimension mismatch".into()));
        }
        if self.nu.dim() != 2 * p {
            return Err(ModelError::Structure(
                "ν envelope must have dimension 2p".into(),
            ));
        }
        if self.x0_lo.len() != p || self.x0_hi.len() != p {
            return Err(ModelError::Structure("x0 bounds dimension mismatch".into()));
        }
        if (0..p).any(|i| self.x0_lo[i] > self.x0_hi[i]) {
            return Err(ModelError::Structure("x0_lo must not exceed x0_hi".into()));
        }
        Ok(())
    }

    /// Componentwise magnitude bound on `ν₁` (first p components of ν).
    pub fn nu1_magnitude(&self, p: usize) -> DVector<f64> {
        self.nu.magnitude_bound().rows(0, p).into_owned()
    }

    /// Componentwise magnitude bound on `ν₂` (last p components of ν).
    pub fn nu2_magnitude(&self, p: usize) -> DVector<f64> {
        self.nu.magnitude_bound().rows(p, p).into_owned()
    }

    pub fn initial_box(&self) -> IntervalBox {
        IntervalBox::new(self.x0_lo.clone(), self.x0_hi.clone())
            .expect("validated initial-state bounds")
    }
}

/// State and control constraint boxes.
#[derive(Debug, Clone)]
pub struct ConstraintBoxes {
    pub state: IntervalBox,
    pub control: IntervalBox,
}

impl ConstraintBoxes {
    pub fn validate(
        &self,
        sys: &ParametricLinearSystem,
        bounds: &SignalBounds,
    ) -> Result<(), ModelError> {
        if self.state.dim() != sys.state_dim() || self.control.dim() != sys.control_dim() {
            return Err(ModelError::Structure("constraint box dimension mismatch".into()));
        }
        if !bounds.initial_box().is_subset_of(&self.state) {
            return Err(ModelError::Structure(
                "initial-state box must be contained in the state constraint set".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform-grid record of a simulated run.
#[derive(Debug, Clone)]
pub struct PlantTrace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    /// `y₁ = x + ν₁`; empty until measurements are attached.
    pub y1: Vec<DVector<f64>>,
    /// `y₂ = ẋ + ν₂`; empty until measurements are attached.
    pub y2: Vec<DVector<f64>>,
}

impl PlantTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("nonempty trace")
    }
}

/// Integrate `ẋ = A(θ)x + Bu(t) + Dω(t)` with fixed-step RK4.
///
/// Disturbance and control are sampled at the start of each step and held
/// constant across it, so envelope membership is checkable pointwise on the
/// grid and piecewise-constant inputs aligned with the grid are integrated
/// exactly through segment boundaries.
pub fn simulate_plant(
    sys: &ParametricLinearSystem,
    theta: &DVector<f64>,
    disturbance: impl Fn(f64) -> DVector<f64>,
    control: impl Fn(f64) -> DVector<f64>,
    x0: &DVector<f64>,
    horizon: f64,
    step: f64,
) -> Result<PlantTrace, ModelError> {
    if !(step > 0.0) || horizon < step {
        return Err(ModelError::BadGrid { step, horizon });
    }
    let a = sys.state_matrix(theta)?;
    let times = ode::uniform_grid(0.0, horizon, step);
    let mut trace = PlantTrace {
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        controls: Vec::with_capacity(times.len()),
        disturbances: Vec::with_capacity(times.len()),
        y1: Vec::new(),
        y2: Vec::new(),
    };
    let mut x = x0.clone();
    for (k, &t) in times.iter().enumerate() {
        let w = disturbance(t);
        let u = control(t);
        if !ode::is_within_limits(&x) {
            return Err(ModelError::Divergence {
                t_last: if k == 0 { 0.0 } else { times[k - 1] },
                limit: ode::DIVERGENCE_LIMIT,
            });
        }
        trace.times.push(t);
        trace.states.push(x.clone());
        trace.controls.push(u.clone());
        trace.disturbances.push(w.clone());
        if k + 1 < times.len() {
            let forcing = sys.b() * &u + sys.d() * &w;
            let f = |_tau: f64, s: &DVector<f64>| &a * s + &forcing;
            x = ode::rk4_step(f, t, &x, step);
        }
    }
    Ok(trace)
}

/// Noisy observations `y₁ = x + ν₁`, `y₂ = ẋ + ν₂`, with `ẋ` evaluated from
/// the plant dynamics at the same instant.
pub fn measure(
    sys: &ParametricLinearSystem,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    omega: &DVector<f64>,
    nu1: &DVector<f64>,
    nu2: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let xdot = sys.state_matrix_unchecked(theta) * x + sys.b() * u + sys.d() * omega;
    (x + nu1, xdot + nu2)
}

/// Attach measurements to every grid point of a trace, drawing `ν = (ν₁, ν₂)`
/// from the given per-instant noise function.
pub fn attach_measurements(
    trace: &mut PlantTrace,
    sys: &ParametricLinearSystem,
    theta: &DVector<f64>,
    noise: impl Fn(f64) -> DVector<f64>,
) {
    let p = sys.state_dim();
    trace.y1.clear();
    trace.y2.clear();
    for k in 0..trace.len() {
        let nu = noise(trace.times[k]);
        let nu1 = nu.rows(0, p).into_owned();
        let nu2 = nu.rows(p, p).into_owned();
        let (y1, y2) = measure(
            sys,
            theta,
            &trace.states[k],
            &trace.controls[k],
            &trace.disturbances[k],
            &nu1,
            &nu2,
        );
        trace.y1.push(y1);
        trace.y2.push(y2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    /// The scalar system of the predictor-comparison figure:
    /// `ẋ = -θx + ω`, `θ ∈ [1, 2]`.
    pub(crate) fn scalar_system() -> ParametricLinearSystem {
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
    fn state_matrix_assembles_affinely() {
        let sys = scalar_system();
        // θ = 1.5 with φ = -1 gives A = -1.5.
        let a = sys.state_matrix(&dvector![1.5]).unwrap();
        assert_eq!(a[(0, 0)], -1.5);

        // Zero coefficients return the nominal matrix.
        let sys2 = ParametricLinearSystem::new(
            dmatrix![2.0, 1.0; 0.0, -1.0],
            vec![DMatrix::identity(2, 2)],
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            IntervalBox::scalar(-1.0, 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(sys2.state_matrix(&dvector![0.0]).unwrap(), *sys2.a_nominal());

        // Identity basis on a zero nominal reproduces θ.
        let sys3 = ParametricLinearSystem::new(
            dmatrix![0.0],
            vec![dmatrix![1.0]],
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            IntervalBox::scalar(0.0, 2.0).unwrap(),
        )
        .unwrap();
        assert_eq!(sys3.state_matrix(&dvector![1.5]).unwrap()[(0, 0)], 1.5);
    }

    #[test]
    fn state_matrix_rejects_bad_inputs() {
        let sys = scalar_system();
        assert!(matches!(
            sys.state_matrix(&dvector![2.5]),
            Err(ModelError::ParameterOutsideDomain)
        ));
        assert!(matches!(
            sys.state_matrix(&dvector![1.0, 1.0]),
            Err(ModelError::Structure(_))
        ));
    }

    #[test]
    fn dimension_checks_at_construction() {
        let bad = ParametricLinearSystem::new(
            dmatrix![0.0],
            vec![dmatrix![1.0, 0.0; 0.0, 1.0]],
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            IntervalBox::scalar(0.0, 1.0).unwrap(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn zero_dynamics_holds_state() {
        let sys = ParametricLinearSystem::new(
            DMatrix::zeros(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            IntervalBox::scalar(-1.0, 1.0).unwrap(),
        )
        .unwrap();
        let x0 = dvector![3.0, -4.0];
        let trace = simulate_plant(
            &sys,
            &dvector![0.5],
            |_| dvector![0.0],
            |_| dvector![0.0],
            &x0,
            1.0,
            1e-2,
        )
        .unwrap();
        for x in &trace.states {
            assert_eq!(*x, x0);
        }
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let sys = scalar_system();
        let trace = simulate_plant(
            &sys,
            &dvector![1.5],
            |_| dvector![0.0],
            |_| dvector![0.0],
            &dvector![1.0],
            1.0,
            1e-3,
        )
        .unwrap();
        let x_end = trace.states.last().unwrap()[0];
        assert!((x_end - (-1.5_f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn constant_disturbance_reaches_equilibrium() {
        // ẋ = -2x + 0.05 settles at 0.025.
        let sys = scalar_system();
        let trace = simulate_plant(
            &sys,
            &dvector![2.0],
            |_| dvector![0.05],
            |_| dvector![0.0],
            &dvector![0.0],
            8.0,
            1e-3,
        )
        .unwrap();
        let x_end = trace.states.last().unwrap()[0];
        assert!((x_end - 0.025).abs() < 1e-7);
    }

    #[test]
    fn divergence_reports_last_finite_time() {
        // ẋ = +5x from x=1 exceeds 1e9 near t = ln(1e9)/5 ≈ 4.14.
        let sys = ParametricLinearSystem::new(
            dmatrix![5.0],
            vec![dmatrix![0.0]],
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            IntervalBox::scalar(-1.0, 1.0).unwrap(),
        )
        .unwrap();
        let err = simulate_plant(
            &sys,
            &dvector![0.0],
            |_| dvector![0.0],
            |_| dvector![0.0],
            &dvector![1.0],
            10.0,
            1e-3,
        )
        .unwrap_err();
        match err {
            ModelError::Divergence { t_last, .. } => {
                assert!(t_last > 4.0 && t_last < 4.3, "t_last = {t_last}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn measurement_examples() {
        let sys = scalar_system();
        // Noiseless: y₁ = x, y₂ = ẋ.
        let (y1, y2) = measure(
            &sys,
            &dvector![1.5],
            &dvector![2.0],
            &dvector![0.0],
            &dvector![0.0],
            &dvector![0.0],
            &dvector![0.0],
        );
        assert_eq!(y1[0], 2.0);
        assert_eq!(y2[0], -3.0);

        // ν₂ = 0.05 shifts the derivative measurement: y₂ = -3 + 0.05.
        let (_, y2) = measure(
            &sys,
            &dvector![1.5],
            &dvector![2.0],
            &dvector![0.0],
            &dvector![0.0],
            &dvector![0.0],
            &dvector![0.05],
        );
        assert!((y2[0] + 2.95).abs() < 1e-15);

        // Vector addition case.
        let sys2 = ParametricLinearSystem::new(
            DMatrix::zeros(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            IntervalBox::scalar(-1.0, 1.0).unwrap(),
        )
        .unwrap();
        let (y1, _) = measure(
            &sys2,
            &dvector![0.0],
            &dvector![1.0, 2.0],
            &dvector![0.0],
            &dvector![0.0],
            &dvector![0.1, -0.1],
            &dvector![0.0, 0.0],
        );
        assert_eq!(y1, dvector![1.1, 1.9]);
    }

    #[test]
    fn measurement_residual_identity() {
        // y₂ - A(θ)y₁ - Bu - Dω = ν₂ - A(θ)ν₁ pointwise on every trace.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let sys = scalar_system();
        let theta = dvector![1.7];
        let a = sys.state_matrix(&theta).unwrap();
        let mut trace = simulate_plant(
            &sys,
            &theta,
            |t| dvector![0.05 * (3.0 * t).sin().signum()],
            |_| dvector![0.0],
            &dvector![1.0],
            2.0,
            1e-3,
        )
        .unwrap();
        let noises: Vec<DVector<f64>> = (0..trace.len())
            .map(|_| dvector![rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)])
            .collect();
        let times = trace.times.clone();
        attach_measurements(&mut trace, &sys, &theta, |t| {
            let k = times.iter().position(|&tk| (tk - t).abs() < 1e-12).unwrap();
            noises[k].clone()
        });
        for k in 0..trace.len() {
            let nu1 = noises[k].rows(0, 1).into_owned();
            let nu2 = noises[k].rows(1, 1).into_owned();
            let lhs = &trace.y2[k]
                - &a * &trace.y1[k]
                - sys.b() * &trace.controls[k]
                - sys.d() * &trace.disturbances[k];
            let rhs = &nu2 - &a * &nu1;
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn rk4_order_on_plant() {
        let sys = scalar_system();
        let run = |h: f64| {
            let trace = simulate_plant(
                &sys,
                &dvector![1.5],
                |_| dvector![0.0],
                |_| dvector![0.0],
                &dvector![1.0],
                1.0,
                h,
            )
            .unwrap();
            (trace.states.last().unwrap()[0] - (-1.5_f64).exp()).abs()
        };
        let ratio = run(2e-2) / run(1e-2);
        assert!((ratio - 16.0).abs() <= 0.3 * 16.0, "ratio = {ratio}");
    }
}
