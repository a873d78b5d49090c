//! Interval predictors with guaranteed enclosure.
//!
//! Two predictors bracket every trajectory of `ẋ = A(θ)x + Bu + Dω` that is
//! consistent with a parameter box and the disturbance envelopes:
//!
//! - the naive predictor propagates the elementwise interval hull
//!   `A_lo ≤ A(θ) ≤ A_hi` with matrix interval arithmetic; it is simple but
//!   its coupled dynamics can be unstable even for stable plants,
//! - the enhanced predictor uses the polytopic form around the box center and
//!   stays tight whenever the center matrix is Metzler (possibly after a
//!   similarity transform by a real eigenbasis).
//!
//! Both predictors share the extended representation
//! `ξ̇ = 𝒜₀ξ + 𝒜₁ξ⁺ + 𝒜₂ξ⁻ + ℬu + δ(t)` on the stacked state
//! `ξ = (x_lo, x_hi)`, which is what the stabilizing feedback and the MPC
//! layer consume.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{block_matrix, real_eigen_decomposition, split_matrix, split_vector};
use crate::model::ParametricLinearSystem;
use crate::ode;
use crate::sets::IntervalBox;

/// Off-diagonal tolerance of the Metzler test.
pub const METZLER_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("predictor state diverged at t={t_last}")]
    Divergence { t_last: f64 },
    #[error("enhanced predictor requires a Metzler center matrix")]
    MetzlerViolated,
    #[error("no real similarity transform to Metzler form: {0}")]
    NotTransformable(String),
    #[error("polytopic model with {dim} parameters needs 2^{dim} vertices; limit is 20")]
    CombinatorialBlowup { dim: usize },
    #[error("interval state is not ordered (component {index}: lo={lo}, hi={hi})")]
    Unordered { index: usize, lo: f64, hi: f64 },
}

/// Elementwise bounds `lo ≤ A(θ) ≤ hi` over a parameter box.
#[derive(Debug, Clone)]
pub struct IntervalMatrix {
    pub lo: DMatrix<f64>,
    pub hi: DMatrix<f64>,
}

/// Tight elementwise hull of `{A(θ) : θ ∈ region}` for the affine family
/// `A(θ) = A_nominal + Σ θᵢφᵢ`.
pub fn interval_hull(sys: &ParametricLinearSystem, region: &IntervalBox) -> IntervalMatrix {
    let mut lo = sys.a_nominal().clone();
    let mut hi = sys.a_nominal().clone();
    for (k, phi) in sys.basis().iter().enumerate() {
        let (a, b) = (region.lo()[k], region.hi()[k]);
        for i in 0..phi.nrows() {
            for j in 0..phi.ncols() {
                let (va, vb) = (a * phi[(i, j)], b * phi[(i, j)]);
                lo[(i, j)] += va.min(vb);
                hi[(i, j)] += va.max(vb);
            }
        }
    }
    IntervalMatrix { lo, hi }
}

/// Polytopic uncertainty around the box center:
/// `A(θ) ∈ hull{A₀ + ΔAᵢ}` with one deviation per sign pattern of the box.
#[derive(Debug, Clone)]
pub struct PolytopicModel {
    pub a0: DMatrix<f64>,
    pub deviations: Vec<DMatrix<f64>>,
    /// `Σᵢ ΔAᵢ⁺`
    pub da_plus: DMatrix<f64>,
    /// `Σᵢ ΔAᵢ⁻`
    pub da_minus: DMatrix<f64>,
}

/// Build the polytopic model of `{A(θ) : θ ∈ region}`: center matrix plus the
/// `2^d` vertex deviations `ΔA_h = Σᵢ hᵢ·radiusᵢ·φᵢ`, `h ∈ {-1, +1}^d`.
pub fn polytopic_vertices(
    sys: &ParametricLinearSystem,
    region: &IntervalBox,
) -> Result<PolytopicModel, PredictionError> {
    polytopic_from_basis(
        sys.state_matrix_unchecked(&region.center()),
        sys.basis(),
        &region.radii(),
    )
}

/// Same as [`polytopic_vertices`] but for an explicitly given center matrix
/// and basis (used for similarity-transformed coordinates).
pub fn polytopic_from_basis(
    a0: DMatrix<f64>,
    basis: &[DMatrix<f64>],
    radii: &DVector<f64>,
) -> Result<PolytopicModel, PredictionError> {
    let d = basis.len();
    if d > 20 {
        return Err(PredictionError::CombinatorialBlowup { dim: d });
    }
    let p = a0.nrows();
    let mut deviations = Vec::with_capacity(1 << d);
    let mut da_plus = DMatrix::zeros(p, p);
    let mut da_minus = DMatrix::zeros(p, p);
    for mask in 0..(1usize << d) {
        let mut dev = DMatrix::zeros(p, p);
        for (i, phi) in basis.iter().enumerate() {
            let sign = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
            dev += phi * (sign * radii[i]);
        }
        let (plus, minus) = split_matrix(&dev);
        da_plus += plus;
        da_minus += minus;
        deviations.push(dev);
    }
    Ok(PolytopicModel {
        a0,
        deviations,
        da_plus,
        da_minus,
    })
}

/// True when every off-diagonal entry is ≥ -[`METZLER_TOL`].
pub fn metzler_check(a: &DMatrix<f64>) -> bool {
    assert_eq!(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j && a[(i, j)] < -METZLER_TOL {
                return false;
            }
        }
    }
    true
}

/// Similarity transform `z = Z⁻¹x` together with the positive/negative splits
/// needed to map interval bounds in and out of the transformed coordinates.
#[derive(Debug, Clone)]
pub struct MetzlerTransform {
    pub z: DMatrix<f64>,
    pub z_inv: DMatrix<f64>,
    z_plus: DMatrix<f64>,
    z_minus: DMatrix<f64>,
    zi_plus: DMatrix<f64>,
    zi_minus: DMatrix<f64>,
    identity: bool,
}

impl MetzlerTransform {
    pub fn identity(p: usize) -> Self {
        Self::from_z(DMatrix::identity(p, p), DMatrix::identity(p, p), true)
    }

    fn from_z(z: DMatrix<f64>, z_inv: DMatrix<f64>, identity: bool) -> Self {
        let (z_plus, z_minus) = split_matrix(&z);
        let (zi_plus, zi_minus) = split_matrix(&z_inv);
        Self {
            z,
            z_inv,
            z_plus,
            z_minus,
            zi_plus,
            zi_minus,
            identity,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Image of the interval `[lo, hi]` under `x ↦ Z⁻¹x`.
    pub fn to_transformed(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        if self.identity {
            return (lo.clone(), hi.clone());
        }
        (
            &self.zi_plus * lo - &self.zi_minus * hi,
            &self.zi_plus * hi - &self.zi_minus * lo,
        )
    }

    /// Image of the interval `[lo, hi]` under `z ↦ Zz`.
    pub fn to_physical(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        if self.identity {
            return (lo.clone(), hi.clone());
        }
        (
            &self.z_plus * lo - &self.z_minus * hi,
            &self.z_plus * hi - &self.z_minus * lo,
        )
    }

    /// Linear map sending the stacked transformed state `(z_lo, z_hi)` to the
    /// stacked physical interval `(x_lo, x_hi)`.
    pub fn stacked_to_physical_matrix(&self) -> DMatrix<f64> {
        block_matrix(&[
            &[&self.z_plus, &(-&self.z_minus)],
            &[&(-&self.z_minus), &self.z_plus],
        ])
    }

    /// Stacked interval map from `other`'s coordinates directly into this
    /// transform's coordinates (`z_self = Z_self⁻¹·Z_other·z_other`), avoiding
    /// the widening of a round trip through physical coordinates. Identity
    /// when both transforms match.
    pub fn stacked_bridge_from(&self, other: &MetzlerTransform) -> DMatrix<f64> {
        let m = &self.z_inv * &other.z;
        let (m_plus, m_minus) = split_matrix(&m);
        block_matrix(&[
            &[&m_plus, &(-&m_minus)],
            &[&(-&m_minus), &m_plus],
        ])
    }
}

/// Find `Z` such that `Z⁻¹ A₀ Z` is Metzler: the identity when `A₀` already
/// is, otherwise a real eigenbasis (then the transformed matrix is diagonal).
/// Fails on complex or defective spectra, signalling the naive fallback.
pub fn find_metzler_transform(a0: &DMatrix<f64>) -> Result<MetzlerTransform, PredictionError> {
    let p = a0.nrows();
    if metzler_check(a0) {
        return Ok(MetzlerTransform::identity(p));
    }
    let (_, basis) = real_eigen_decomposition(a0).ok_or_else(|| {
        PredictionError::NotTransformable(
            "spectrum is complex, repeated or too ill-conditioned".into(),
        )
    })?;
    let z_inv = basis.clone().try_inverse().ok_or_else(|| {
        PredictionError::NotTransformable("eigenbasis is numerically singular".into())
    })?;
    Ok(MetzlerTransform::from_z(basis, z_inv, false))
}

/// Predictor state `ξ = (x_lo, x_hi)` at one instant.
#[derive(Debug, Clone)]
pub struct IntervalState {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub t: f64,
}

impl IntervalState {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>, t: f64) -> Result<Self, PredictionError> {
        for i in 0..lo.len() {
            if lo[i] > hi[i] {
                return Err(PredictionError::Unordered {
                    index: i,
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        Ok(Self { lo, hi, t })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Stacked vector `(x_lo, x_hi)`.
    pub fn stacked(&self) -> DVector<f64> {
        let p = self.dim();
        DVector::from_fn(2 * p, |i, _| if i < p { self.lo[i] } else { self.hi[i - p] })
    }

    pub fn from_stacked(xi: &DVector<f64>, t: f64) -> Self {
        let p = xi.len() / 2;
        Self {
            lo: xi.rows(0, p).into_owned(),
            hi: xi.rows(p, p).into_owned(),
            t,
        }
    }

    pub fn width(&self) -> DVector<f64> {
        &self.hi - &self.lo
    }

    pub fn is_ordered_with_tol(&self, tol: f64) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= self.hi[i] + tol)
    }
}

fn naive_rhs(
    interval: &IntervalMatrix,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    forcing_lo: &DVector<f64>,
    forcing_hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (alo_p, alo_m) = split_matrix(&interval.lo);
    let (ahi_p, ahi_m) = split_matrix(&interval.hi);
    let (lo_p, lo_m) = split_vector(lo);
    let (hi_p, hi_m) = split_vector(hi);
    let dlo = &alo_p * &lo_p - &ahi_p * &lo_m - &alo_m * &hi_p + &ahi_m * &hi_m + forcing_lo;
    let dhi = &ahi_p * &hi_p - &alo_p * &hi_m - &ahi_m * &lo_p + &alo_m * &lo_m + forcing_hi;
    (dlo, dhi)
}

fn enhanced_rhs(
    poly: &PolytopicModel,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    forcing_lo: &DVector<f64>,
    forcing_hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (_, lo_m) = split_vector(lo);
    let (hi_p, _) = split_vector(hi);
    let dlo = &poly.a0 * lo - &poly.da_plus * &lo_m - &poly.da_minus * &hi_p + forcing_lo;
    let dhi = &poly.a0 * hi + &poly.da_plus * &hi_p + &poly.da_minus * &lo_m + forcing_hi;
    (dlo, dhi)
}

fn disturbance_forcing(
    dmat: &DMatrix<f64>,
    omega_lo: &DVector<f64>,
    omega_hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (d_plus, d_minus) = split_matrix(dmat);
    (
        &d_plus * omega_lo - &d_minus * omega_hi,
        &d_plus * omega_hi - &d_minus * omega_lo,
    )
}

fn step_interval(
    rhs: impl Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>),
    state: &IntervalState,
    step: f64,
) -> Result<IntervalState, PredictionError> {
    let xi = state.stacked();
    let p = state.dim();
    let f = |_t: f64, s: &DVector<f64>| {
        let lo = s.rows(0, p).into_owned();
        let hi = s.rows(p, p).into_owned();
        let (dlo, dhi) = rhs(&lo, &hi);
        let mut out = DVector::zeros(2 * p);
        out.rows_mut(0, p).copy_from(&dlo);
        out.rows_mut(p, p).copy_from(&dhi);
        out
    };
    let next = ode::rk4_step(f, state.t, &xi, step);
    if !ode::is_within_limits(&next) {
        return Err(PredictionError::Divergence { t_last: state.t });
    }
    Ok(IntervalState::from_stacked(&next, state.t + step))
}

/// One RK4 step of the naive (interval-arithmetic) predictor. Inputs are held
/// constant across the step.
pub fn step_naive(
    interval: &IntervalMatrix,
    state: &IntervalState,
    u: &DVector<f64>,
    omega_lo: &DVector<f64>,
    omega_hi: &DVector<f64>,
    b: &DMatrix<f64>,
    dmat: &DMatrix<f64>,
    step: f64,
) -> Result<IntervalState, PredictionError> {
    let bu = b * u;
    let (w_lo, w_hi) = disturbance_forcing(dmat, omega_lo, omega_hi);
    step_interval(
        |lo, hi| naive_rhs(interval, lo, hi, &(&bu + &w_lo), &(&bu + &w_hi)),
        state,
        step,
    )
}

/// One RK4 step of the enhanced (polytopic) predictor; requires a Metzler
/// center matrix.
pub fn step_enhanced(
    poly: &PolytopicModel,
    state: &IntervalState,
    u: &DVector<f64>,
    omega_lo: &DVector<f64>,
    omega_hi: &DVector<f64>,
    b: &DMatrix<f64>,
    dmat: &DMatrix<f64>,
    step: f64,
) -> Result<IntervalState, PredictionError> {
    if !metzler_check(&poly.a0) {
        return Err(PredictionError::MetzlerViolated);
    }
    let bu = b * u;
    let (w_lo, w_hi) = disturbance_forcing(dmat, omega_lo, omega_hi);
    step_interval(
        |lo, hi| enhanced_rhs(poly, lo, hi, &(&bu + &w_lo), &(&bu + &w_hi)),
        state,
        step,
    )
}

/// Which predictor an extended system was assembled from.
#[derive(Debug, Clone)]
pub enum PredictorForm {
    Naive(IntervalMatrix),
    Enhanced(PolytopicModel),
}

impl PredictorForm {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorForm::Naive(_) => "naive",
            PredictorForm::Enhanced(_) => "enhanced",
        }
    }
}

/// Extended representation `ξ̇ = 𝒜₀ξ + 𝒜₁ξ⁺ + 𝒜₂ξ⁻ + ℬu + δ(t)` of either
/// predictor on the stacked state `ξ = (x_lo, x_hi)`.
#[derive(Debug, Clone)]
pub struct ExtendedSystem {
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Maps the stacked envelopes `(ω_lo, ω_hi)` to the known input δ.
    pub delta_map: DMatrix<f64>,
}

impl ExtendedSystem {
    pub fn state_dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn delta(&self, omega_lo: &DVector<f64>, omega_hi: &DVector<f64>) -> DVector<f64> {
        let r = omega_lo.len();
        let stacked = DVector::from_fn(2 * r, |i, _| {
            if i < r {
                omega_lo[i]
            } else {
                omega_hi[i - r]
            }
        });
        &self.delta_map * stacked
    }

    /// Envelope box of `δ(t)` over all segment values of the ω envelopes.
    pub fn delta_box(&self, omega: &crate::signal::Envelope) -> IntervalBox {
        let mut lo = DVector::from_element(self.state_dim(), f64::INFINITY);
        let mut hi = DVector::from_element(self.state_dim(), f64::NEG_INFINITY);
        let mut times: Vec<f64> = omega
            .lo
            .breakpoints()
            .iter()
            .chain(omega.hi.breakpoints())
            .copied()
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        for t in times {
            let d = self.delta(omega.lo_at(t), omega.hi_at(t));
            lo = lo.zip_map(&d, f64::min);
            hi = hi.zip_map(&d, f64::max);
        }
        IntervalBox::new(lo, hi).expect("delta box is well-formed")
    }

    pub fn rhs(&self, xi: &DVector<f64>, u: &DVector<f64>, delta: &DVector<f64>) -> DVector<f64> {
        let (xi_p, xi_m) = split_vector(xi);
        &self.a0 * xi + &self.a1 * xi_p + &self.a2 * xi_m + &self.b * u + delta
    }

    /// One RK4 step with `u` and `δ` held constant.
    pub fn step(
        &self,
        xi: &DVector<f64>,
        u: &DVector<f64>,
        delta: &DVector<f64>,
        t: f64,
        h: f64,
    ) -> Result<DVector<f64>, PredictionError> {
        let next = ode::rk4_step(|_t, s| self.rhs(s, u, delta), t, xi, h);
        if !ode::is_within_limits(&next) {
            return Err(PredictionError::Divergence { t_last: t });
        }
        Ok(next)
    }
}

/// Assemble the extended block matrices for the chosen predictor.
pub fn assemble_extended(
    form: &PredictorForm,
    b: &DMatrix<f64>,
    dmat: &DMatrix<f64>,
) -> ExtendedSystem {
    let p = b.nrows();
    let zero = DMatrix::zeros(p, p);
    let (a0, a1, a2) = match form {
        PredictorForm::Naive(interval) => {
            let (alo_p, alo_m) = split_matrix(&interval.lo);
            let (ahi_p, ahi_m) = split_matrix(&interval.hi);
            let a1 = block_matrix(&[
                &[&alo_p, &(-&alo_m)],
                &[&(-&ahi_m), &ahi_p],
            ]);
            let a2 = block_matrix(&[
                &[&(-&ahi_p), &ahi_m],
                &[&alo_m, &(-&alo_p)],
            ]);
            (DMatrix::zeros(2 * p, 2 * p), a1, a2)
        }
        PredictorForm::Enhanced(poly) => {
            let a0 = block_matrix(&[&[&poly.a0, &zero], &[&zero, &poly.a0]]);
            let a1 = block_matrix(&[
                &[&zero, &(-&poly.da_minus)],
                &[&zero, &poly.da_plus],
            ]);
            let a2 = block_matrix(&[
                &[&(-&poly.da_plus), &zero],
                &[&poly.da_minus, &zero],
            ]);
            (a0, a1, a2)
        }
    };
    let b_ext = block_matrix(&[&[b], &[b]]);
    let (d_plus, d_minus) = split_matrix(dmat);
    let delta_map = block_matrix(&[
        &[&d_plus, &(-&d_minus)],
        &[&(-&d_minus), &d_plus],
    ]);
    ExtendedSystem {
        a0,
        a1,
        a2,
        b: b_ext,
        delta_map,
    }
}

/// A ready-to-run predictor: form + extended system in working coordinates,
/// plus the coordinate transform used by the enhanced Metzler route.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub form: PredictorForm,
    pub ext: ExtendedSystem,
    pub transform: MetzlerTransform,
}

impl Predictor {
    /// Naive predictor in the original coordinates.
    pub fn naive(sys: &ParametricLinearSystem, region: &IntervalBox) -> Predictor {
        let hull = interval_hull(sys, region);
        let form = PredictorForm::Naive(hull);
        let ext = assemble_extended(&form, sys.b(), sys.d());
        Predictor {
            form,
            ext,
            transform: MetzlerTransform::identity(sys.state_dim()),
        }
    }

    /// Enhanced predictor; applies a similarity transform when the center
    /// matrix is not Metzler in the original coordinates.
    pub fn enhanced(
        sys: &ParametricLinearSystem,
        region: &IntervalBox,
    ) -> Result<Predictor, PredictionError> {
        let a0 = sys.state_matrix_unchecked(&region.center());
        let transform = find_metzler_transform(&a0)?;
        let (a0_work, basis_work, b_work, d_work);
        if transform.is_identity() {
            a0_work = a0;
            basis_work = sys.basis().to_vec();
            b_work = sys.b().clone();
            d_work = sys.d().clone();
        } else {
            let mut a = &transform.z_inv * &a0 * &transform.z;
            // The diagonalization leaves eigen-solver residue in the
            // off-diagonal entries; zero it out so the Metzler property is
            // exact. Anything larger than the cleanup tolerance means the
            // transform is unusable.
            let scale = a.amax().max(1.0);
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    if i != j {
                        if a[(i, j)].abs() > 1e-9 * scale {
                            return Err(PredictionError::NotTransformable(format!(
                                "transformed matrix has off-diagonal residue {:.3e}",
                                a[(i, j)]
                            )));
                        }
                        a[(i, j)] = 0.0;
                    }
                }
            }
            a0_work = a;
            basis_work = sys
                .basis()
                .iter()
                .map(|phi| &transform.z_inv * phi * &transform.z)
                .collect();
            b_work = &transform.z_inv * sys.b();
            d_work = &transform.z_inv * sys.d();
        }
        if !metzler_check(&a0_work) {
            return Err(PredictionError::MetzlerViolated);
        }
        let poly = polytopic_from_basis(a0_work, &basis_work, &region.radii())?;
        let form = PredictorForm::Enhanced(poly);
        let ext = assemble_extended(&form, &b_work, &d_work);
        Ok(Predictor {
            form,
            ext,
            transform,
        })
    }

    /// Enhanced whenever the Metzler route succeeds, naive as a last resort.
    pub fn auto(sys: &ParametricLinearSystem, region: &IntervalBox) -> Predictor {
        Predictor::enhanced(sys, region).unwrap_or_else(|_| Predictor::naive(sys, region))
    }

    pub fn state_dim(&self) -> usize {
        self.ext.state_dim() / 2
    }

    /// Re-anchor from a measurement: the widest interval consistent with
    /// `y₁ = x + ν₁` and `|ν₁| ≤ nu1_mag`, mapped into working coordinates.
    pub fn anchor(&self, y1: &DVector<f64>, nu1_mag: &DVector<f64>, t: f64) -> IntervalState {
        let lo = y1 - nu1_mag;
        let hi = y1 + nu1_mag;
        let (zlo, zhi) = self.transform.to_transformed(&lo, &hi);
        IntervalState { lo: zlo, hi: zhi, t }
    }

    /// Anchor from an explicit initial-state box (Assumption-style bounds
    /// `x(0) ∈ [lo, hi]`), mapped into working coordinates.
    pub fn anchor_box(&self, lo: &DVector<f64>, hi: &DVector<f64>, t: f64) -> IntervalState {
        let (zlo, zhi) = self.transform.to_transformed(lo, hi);
        IntervalState {
            lo: zlo,
            hi: zhi,
            t,
        }
    }

    /// Map a working-coordinate state back to a physical interval.
    pub fn to_physical(&self, state: &IntervalState) -> IntervalState {
        let (lo, hi) = self.transform.to_physical(&state.lo, &state.hi);
        IntervalState {
            lo,
            hi,
            t: state.t,
        }
    }

    /// One predictor step in working coordinates; physical-envelope values
    /// are passed through the extended system's δ map (which already holds
    /// the transformed disturbance matrix).
    pub fn step(
        &self,
        state: &IntervalState,
        u: &DVector<f64>,
        omega_lo: &DVector<f64>,
        omega_hi: &DVector<f64>,
        h: f64,
    ) -> Result<IntervalState, PredictionError> {
        let delta = self.ext.delta(omega_lo, omega_hi);
        let next = self.ext.step(&state.stacked(), u, &delta, state.t, h)?;
        Ok(IntervalState::from_stacked(&next, state.t + h))
    }
}
