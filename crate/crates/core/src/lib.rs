//! Robust adaptive model-predictive control for linear systems with unknown
//! parameters and bounded disturbances.
//!
//! The crate is organized as a pipeline:
//!
//! - [`model`] — the uncertain plant `ẋ = A(θ)x + Bu + Dω`, its simulation and
//!   noisy measurements,
//! - [`estimation`] — least-squares identification of `θ` with a guaranteed
//!   error bound and a shrink-only confidence box,
//! - [`prediction`] — interval predictors that bracket every trajectory
//!   consistent with the confidence box and the disturbance envelopes,
//! - [`stabilization`] — a nonlinear feedback on the predictor state with an
//!   eigenvalue-checked ISS certificate and the induced terminal set,
//! - [`mpc`] — the dual receding-horizon controller (sampled open-loop plans
//!   outside the terminal set, certified feedback inside),
//! - [`vehicle`] — a lane-keeping instantiation on a dynamic bicycle model.
//!
//! All randomized components are seeded explicitly; given identical inputs and
//! seeds every function in this crate is deterministic.

pub mod estimation;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod ode;
pub mod prediction;
pub mod sets;
pub mod signal;
pub mod stabilization;
pub mod vehicle;

pub use sets::IntervalBox;
pub use signal::{Envelope, PiecewiseConstant};
