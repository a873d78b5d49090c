//! Dual receding-horizon control on the interval predictor.
//!
//! Outside the terminal set the controller solves a sampled open-loop
//! problem: piecewise-constant candidate plans are drawn uniformly over the
//! control box (plus a zero plan and the shifted previous plan as warm
//! starts), rolled through the enhanced predictor, and the cheapest feasible
//! plan wins. Inside the terminal set it switches to the certified nonlinear
//! feedback. Replanning happens every `τ` seconds with a confidence-region
//! refresh and a predictor re-anchor from the current measurement.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::estimation::{
    build_regression, check_pe, error_bound, least_squares, ConfidenceRegion, EstimationError,
    NoiseBudget, PeWitness, RegressorStream,
};
use crate::model::{ConstraintBoxes, ParametricLinearSystem, SignalBounds};
use crate::ode;
use crate::prediction::{IntervalState, MetzlerTransform, Predictor, PredictionError};
use crate::sets::IntervalBox;
use crate::stabilization::{
    feedback_control, LyapunovCertificate, StabilizationArtifacts, TerminalSet,
};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid OCP specification: {0}")]
    BadSpec(String),
    #[error(
        "controller fault at t={t}: no feasible plan and the state is outside the terminal set \
         (best infeasibility margin {margin:.3e})"
    )]
    ControllerFault { t: f64, margin: f64 },
    #[error("estimation failed: {0}")]
    Estimation(#[from] EstimationError),
    #[error("prediction failed: {0}")]
    Prediction(#[from] PredictionError),
    #[error("{0}")]
    Structure(String),
}

/// Open-loop problem description: horizon, application time, quadratic
/// weights, and the sampling budget.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub horizon: f64,
    pub apply_time: f64,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub segments: usize,
    pub candidates: usize,
    pub grid_per_segment: usize,
    pub seed: u64,
}

impl OcpSpec {
    pub fn validate(&self, state_dim_2p: usize, control_dim: usize) -> Result<(), MpcError> {
        if !(self.apply_time > 0.0 && self.apply_time < self.horizon) {
            return Err(MpcError::BadSpec(format!(
                "need 0 < τ={} < T={}",
                self.apply_time, self.horizon
            )));
        }
        if self.segments == 0 || self.candidates == 0 || self.grid_per_segment == 0 {
            return Err(MpcError::BadSpec("segment/candidate counts must be ≥ 1".into()));
        }
        let seg = self.horizon / self.segments as f64;
        let ratio = self.apply_time / seg;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(MpcError::BadSpec(
                "τ must be an integer multiple of the segment length T/K".into(),
            ));
        }
        for (name, w, dim) in [
            ("W1", &self.w1, state_dim_2p),
            ("W2", &self.w2, state_dim_2p),
            ("W3", &self.w3, control_dim),
        ] {
            if w.shape() != (dim, dim) {
                return Err(MpcError::BadSpec(format!("{name} must be {dim}x{dim}")));
            }
            if (w - w.transpose()).amax() > 1e-9 {
                return Err(MpcError::BadSpec(format!("{name} must be symmetric")));
            }
            if crate::linalg::lambda_min_symmetric(w) < -1e-9 {
                return Err(MpcError::BadSpec(format!("{name} must be PSD")));
            }
        }
        Ok(())
    }

    pub fn segment_len(&self) -> f64 {
        self.horizon / self.segments as f64
    }

    pub fn shift_segments(&self) -> usize {
        (self.apply_time / self.segment_len()).round() as usize
    }
}

/// Piecewise-constant open-loop plan over `[t_start, t_start + T]`.
#[derive(Debug, Clone)]
pub struct ControlPlan {
    pub t_start: f64,
    pub segment_len: f64,
    pub values: Vec<DVector<f64>>,
    pub cost: f64,
    pub feasible: bool,
    /// Predicted stacked state at the end of the horizon (working coords).
    pub terminal_xi: DVector<f64>,
}

impl ControlPlan {
    pub fn zero(t_start: f64, spec: &OcpSpec, control_dim: usize) -> Self {
        Self {
            t_start,
            segment_len: spec.segment_len(),
            values: vec![DVector::zeros(control_dim); spec.segments],
            cost: f64::INFINITY,
            feasible: false,
            terminal_xi: DVector::zeros(0),
        }
    }

    pub fn value_at(&self, t: f64) -> &DVector<f64> {
        let idx = ((t - self.t_start) / self.segment_len).floor() as isize;
        let idx = idx.clamp(0, self.values.len() as isize - 1) as usize;
        &self.values[idx]
    }

    /// Warm start for the next replan: drop the first `shift` segments and
    /// pad the tail with zero segments.
    pub fn shifted(&self, new_start: f64, shift: usize) -> Self {
        let control_dim = self.values[0].len();
        let mut values: Vec<DVector<f64>> = self.values.iter().skip(shift).cloned().collect();
        values.resize(self.values.len(), DVector::zeros(control_dim));
        Self {
            t_start: new_start,
            segment_len: self.segment_len,
            values,
            cost: f64::INFINITY,
            feasible: false,
            terminal_xi: DVector::zeros(0),
        }
    }
}

/// How the control constraint is checked during rollouts: directly on the
/// optimized input, or on the total input when a preliminary state feedback
/// is folded into the plant and consumes part of the control budget.
#[derive(Debug, Clone)]
pub enum ControlConstraint {
    Direct,
    WithStateFeedback {
        gain: DMatrix<f64>,
        nu1_mag: DVector<f64>,
    },
}

impl ControlConstraint {
    /// Worst violation of the control box by the realized total input over
    /// the current state interval (0 when admissible).
    pub fn violation(
        &self,
        v: &DVector<f64>,
        x_lo: &DVector<f64>,
        x_hi: &DVector<f64>,
        control_box: &IntervalBox,
    ) -> f64 {
        match self {
            ControlConstraint::Direct => control_box.violation(v),
            ControlConstraint::WithStateFeedback { gain, nu1_mag } => {
                let center = (x_lo + x_hi) * 0.5;
                let radii = (x_hi - x_lo) * 0.5 + nu1_mag;
                let u_center = v + gain * center;
                let u_radius = gain.map(f64::abs) * radii;
                let mut worst: f64 = 0.0;
                for i in 0..v.len() {
                    worst = worst
                        .max(control_box.lo()[i] - (u_center[i] - u_radius[i]))
                        .max((u_center[i] + u_radius[i]) - control_box.hi()[i]);
                }
                worst
            }
        }
    }
}

/// Evaluates the terminal-set membership of physical intervals through the
/// synthesis-time coordinates the certificate lives in.
#[derive(Debug, Clone)]
pub struct TerminalGauge {
    pub cert: LyapunovCertificate,
    pub transform: MetzlerTransform,
    pub set: TerminalSet,
}

impl TerminalGauge {
    pub fn value_physical(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
        let (zl, zh) = self.transform.to_transformed(lo, hi);
        let state = IntervalState {
            lo: zl,
            hi: zh,
            t: 0.0,
        };
        self.cert.value(&state.stacked())
    }

    pub fn contains_physical(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> bool {
        self.value_physical(lo, hi) <= self.set.level
    }

    /// Direct interval map from a predictor's working coordinates into the
    /// certificate coordinates (identity when they coincide), avoiding the
    /// widening of a round trip through physical space.
    pub fn bridge_from(&self, predictor: &Predictor) -> DMatrix<f64> {
        self.transform.stacked_bridge_from(&predictor.transform)
    }

    pub fn value_bridged(&self, bridge: &DMatrix<f64>, state: &IntervalState) -> f64 {
        self.cert.value(&(bridge * state.stacked()))
    }
}

/// Everything a plan evaluation needs besides the plan itself.
pub struct OcpContext<'a> {
    pub predictor: &'a Predictor,
    pub gauge: &'a TerminalGauge,
    pub constraints: &'a ConstraintBoxes,
    pub control_rule: &'a ControlConstraint,
    pub omega: &'a crate::signal::Envelope,
    pub spec: &'a OcpSpec,
}

#[derive(Debug, Clone)]
pub struct PlanEvaluation {
    pub cost: f64,
    pub feasible: bool,
    /// Worst constraint violation encountered (0 when feasible).
    pub margin: f64,
    pub terminal_xi: DVector<f64>,
    pub terminal_value: f64,
    pub diverged: bool,
}

/// Roll the predictor through a plan and score it: quadratic cost by
/// trapezoid, feasibility from the state/control boxes at every grid point
/// and terminal-set membership at the horizon end.
pub fn evaluate_plan(
    plan: &ControlPlan,
    state0: &IntervalState,
    ctx: &OcpContext<'_>,
) -> PlanEvaluation {
    let spec = ctx.spec;
    let h = spec.segment_len() / spec.grid_per_segment as f64;
    let mut state = state0.clone();
    let mut cost = 0.0;
    let mut margin: f64 = 0.0;

    let stage = |state: &IntervalState, u: &DVector<f64>| -> (f64, f64) {
        let phys = ctx.predictor.to_physical(state);
        let xi = phys.stacked();
        let quad = (xi.transpose() * &spec.w2 * &xi)[(0, 0)]
            + (u.transpose() * &spec.w3 * u)[(0, 0)];
        let state_viol = ctx
            .constraints
            .state
            .violation(&phys.lo)
            .max(ctx.constraints.state.violation(&phys.hi));
        let control_viol =
            ctx.control_rule
                .violation(u, &phys.lo, &phys.hi, &ctx.constraints.control);
        (quad, state_viol.max(control_viol))
    };

    for seg in 0..spec.segments {
        let u = &plan.values[seg];
        let (mut prev_quad, viol) = stage(&state, u);
        margin = margin.max(viol);
        for _ in 0..spec.grid_per_segment {
            let omega_lo = ctx.omega.lo_at(state.t).clone();
            let omega_hi = ctx.omega.hi_at(state.t).clone();
            match ctx.predictor.step(&state, u, &omega_lo, &omega_hi, h) {
                Ok(next) => state = next,
                Err(_) => {
                    return PlanEvaluation {
                        cost: f64::INFINITY,
                        feasible: false,
                        margin: f64::INFINITY,
                        terminal_xi: state.stacked(),
                        terminal_value: f64::INFINITY,
                        diverged: true,
                    }
                }
            }
            let (quad, viol) = stage(&state, u);
            cost += 0.5 * h * (prev_quad + quad);
            prev_quad = quad;
            margin = margin.max(viol);
        }
    }

    let phys = ctx.predictor.to_physical(&state);
    let xi_phys = phys.stacked();
    cost += (xi_phys.transpose() * &spec.w1 * &xi_phys)[(0, 0)];
    let bridge = ctx.gauge.bridge_from(ctx.predictor);
    let terminal_value = ctx.gauge.value_bridged(&bridge, &state);
    let terminal_slack = terminal_value - ctx.gauge.set.level;
    if terminal_slack > 0.0 {
        margin = margin.max(terminal_slack);
    }
    PlanEvaluation {
        cost,
        feasible: margin <= 0.0,
        margin,
        terminal_xi: state.stacked(),
        terminal_value,
        diverged: false,
    }
}

#[derive(Debug, Clone)]
pub struct OcpInfeasible {
    pub best_margin: f64,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub plan: ControlPlan,
    /// Whether the shifted previous plan was itself feasible (the recursive
    /// feasibility mechanism), when a warm start was available.
    pub warm_start_feasible: Option<bool>,
    pub zero_plan_feasible: bool,
}

/// Sample candidate plans, evaluate them all, and return the feasible plan
/// of minimum cost (ties broken by candidate index). Candidate order:
/// the zero plan, the shifted previous plan when available, then uniform
/// draws over the control box.
pub fn solve_ocp(
    state0: &IntervalState,
    ctx: &OcpContext<'_>,
    warm_start: Option<&ControlPlan>,
    t_start: f64,
    rng: &mut ChaCha8Rng,
) -> Result<OcpSolution, OcpInfeasible> {
    let spec = ctx.spec;
    let q = ctx.constraints.control.dim();
    let mut candidates: Vec<ControlPlan> = Vec::with_capacity(spec.candidates + 2);
    candidates.push(ControlPlan::zero(t_start, spec, q));
    let warm_idx = warm_start.map(|prev| {
        candidates.push(prev.shifted(t_start, spec.shift_segments()));
        1usize
    });
    for _ in 0..spec.candidates {
        let values = (0..spec.segments)
            .map(|_| ctx.constraints.control.sample_uniform(rng))
            .collect();
        candidates.push(ControlPlan {
            t_start,
            segment_len: spec.segment_len(),
            values,
            cost: f64::INFINITY,
            feasible: false,
            terminal_xi: DVector::zeros(0),
        });
    }

    let evals: Vec<PlanEvaluation> = candidates
        .par_iter()
        .map(|plan| evaluate_plan(plan, state0, ctx))
        .collect();

    let mut best: Option<usize> = None;
    let mut best_margin = f64::INFINITY;
    for (i, ev) in evals.iter().enumerate() {
        best_margin = best_margin.min(ev.margin);
        if ev.feasible {
            let better = match best {
                None => true,
                Some(b) => ev.cost < evals[b].cost,
            };
            if better {
                best = Some(i);
            }
        }
    }
    match best {
        Some(i) => {
            let warm_start_feasible = warm_idx.map(|w| evals[w].feasible);
            let zero_plan_feasible = evals[0].feasible;
            let mut plan = candidates.swap_remove(i);
            let ev = &evals[i];
            plan.cost = ev.cost;
            plan.feasible = true;
            plan.terminal_xi = ev.terminal_xi.clone();
            Ok(OcpSolution {
                plan,
                warm_start_feasible,
                zero_plan_feasible,
            })
        }
        None => Err(OcpInfeasible { best_margin }),
    }
}

/// Branch of the switching law at a replanning instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Plan,
    Feedback,
}

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::Plan => "plan",
            Branch::Feedback => "feedback",
        }
    }
}

/// The switching rule: terminal feedback inside the terminal set (boundary
/// included), the open-loop plan outside. Having neither is a fault.
pub fn switching_control(
    value_at_anchor: f64,
    terminal: &TerminalSet,
    plan_available: bool,
) -> Result<Branch, &'static str> {
    if value_at_anchor <= terminal.level {
        Ok(Branch::Feedback)
    } else if plan_available {
        Ok(Branch::Plan)
    } else {
        Err("no feasible plan and the state is outside the terminal set")
    }
}

// ---------------------------------------------------------------------------
// Receding-horizon runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateBoundMode {
    /// Use the configured worst-case bound.
    Configured,
    /// Use the running max of |y₁| plus the ν₁ bound.
    Observed,
}

#[derive(Debug, Clone)]
pub struct EstimationOptions {
    /// Excitation window length ℓ (seconds).
    pub window: f64,
    /// Bound on the Euclidean norm of the regression perturbation;
    /// derived from the envelopes when not given.
    pub eta_bar: Option<f64>,
    /// Worst-case ‖x‖∞ used in the error radius.
    pub x_inf_bound: f64,
    pub state_bound_mode: StateBoundMode,
    /// Window start spacing of the PE scan.
    pub pe_stride: f64,
    /// Skip the PE scan and trust this excitation level instead.
    pub vartheta_override: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorMode {
    Auto,
    Naive,
    Enhanced,
}

/// All inputs of a closed-loop experiment.
pub struct RunInputs<'a> {
    pub sys: &'a ParametricLinearSystem,
    pub true_theta: DVector<f64>,
    pub x0: DVector<f64>,
    pub bounds: &'a SignalBounds,
    pub constraints: &'a ConstraintBoxes,
    pub spec: &'a OcpSpec,
    pub estimation: EstimationOptions,
    pub artifacts: &'a StabilizationArtifacts,
    /// Predictor assembled for the full prior (the certificate system).
    pub synth_predictor: &'a Predictor,
    pub terminal: TerminalSet,
    pub control_rule: ControlConstraint,
    pub predictor_mode: PredictorMode,
    pub duration: f64,
    pub sim_step: f64,
    /// Measurement sampling period (multiple of `sim_step`).
    pub meas_step: f64,
    /// Log every n-th simulation node.
    pub log_every: usize,
    /// Realized disturbance (must respect the envelopes).
    pub true_disturbance: &'a dyn Fn(f64) -> DVector<f64>,
    /// Realized measurement noise ν(t) ∈ ℝ^{2p} (must respect the envelopes).
    pub noise: &'a dyn Fn(f64) -> DVector<f64>,
}

/// One logged grid instant.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub t: f64,
    pub x: DVector<f64>,
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u: DVector<f64>,
    pub v: f64,
    pub level: f64,
    pub branch: Branch,
    pub feasible: bool,
    pub theta_hat: DVector<f64>,
    pub theta_box_lo: DVector<f64>,
    pub theta_box_hi: DVector<f64>,
}

/// One replanning event.
#[derive(Debug, Clone)]
pub struct ReplanRecord {
    pub t: f64,
    pub branch: Branch,
    pub feasible: bool,
    pub anchor_value: f64,
    pub plan_cost: Option<f64>,
    pub plan_terminal_value: Option<f64>,
    pub warm_start_feasible: Option<bool>,
    pub predictor_form: &'static str,
    pub pe_vartheta: Option<f64>,
    pub delta_theta: Option<f64>,
    pub region_lo: DVector<f64>,
    pub region_hi: DVector<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ViolationCounts {
    pub state: usize,
    pub control: usize,
    pub inclusion: usize,
}

/// Full closed-loop record.
#[derive(Debug, Clone)]
pub struct ExperimentLog {
    pub rows: Vec<LogRow>,
    pub replans: Vec<ReplanRecord>,
    pub violations: ViolationCounts,
    pub branch_switches: usize,
    pub time_entered_terminal: Option<f64>,
    pub estimator_inconsistent: bool,
    pub warnings: Vec<String>,
    pub level: f64,
}

impl ExperimentLog {
    /// CSV schema: t, x…, x_lo…, x_hi…, u…, V, level, branch, feasible,
    /// theta_hat…, theta_box_lo…, theta_box_hi….
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let p = self.rows.first().map_or(0, |r| r.x.len());
        let q = self.rows.first().map_or(0, |r| r.u.len());
        let d = self.rows.first().map_or(0, |r| r.theta_hat.len());
        let mut header = vec!["t".to_string()];
        let cols = |name: &str, k: usize| (1..=k).map(move |i| format!("{name}{i}")).collect::<Vec<_>>();
        header.extend(cols("x", p));
        header.extend(cols("x_lo", p));
        header.extend(cols("x_hi", p));
        header.extend(cols("u", q));
        header.push("V".into());
        header.push("level".into());
        header.push("branch".into());
        header.push("feasible".into());
        header.extend(cols("theta_hat", d));
        header.extend(cols("theta_box_lo", d));
        header.extend(cols("theta_box_hi", d));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut fields: Vec<String> = vec![format!("{:?}", r.t)];
            let push_vec = |fields: &mut Vec<String>, v: &DVector<f64>| {
                for x in v.iter() {
                    fields.push(format!("{x:?}"));
                }
            };
            push_vec(&mut fields, &r.x);
            push_vec(&mut fields, &r.x_lo);
            push_vec(&mut fields, &r.x_hi);
            push_vec(&mut fields, &r.u);
            fields.push(format!("{:?}", r.v));
            fields.push(format!("{:?}", r.level));
            fields.push(r.branch.name().to_string());
            fields.push(if r.feasible { "1" } else { "0" }.to_string());
            push_vec(&mut fields, &r.theta_hat);
            push_vec(&mut fields, &r.theta_box_lo);
            push_vec(&mut fields, &r.theta_box_hi);
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Measurement accumulation plus confidence-region refresh, shared by the
/// receding-horizon loop and the standalone estimation runs.
pub struct OnlineEstimator {
    stream: RegressorStream,
    region: ConfidenceRegion,
    opts: EstimationOptions,
    observed_y1_max: f64,
    nu1_norm_bound: f64,
}

impl OnlineEstimator {
    pub fn new(
        sys: &ParametricLinearSystem,
        bounds: &SignalBounds,
        mut opts: EstimationOptions,
    ) -> Result<Self, EstimationError> {
        if opts.eta_bar.is_none() {
            opts.eta_bar = Some(crate::estimation::eta_bound_from_envelopes(sys, bounds));
        }
        Ok(Self {
            stream: RegressorStream::new(sys.param_dim()),
            region: ConfidenceRegion::new(sys.theta_set().clone(), sys.theta_set().center())?,
            opts,
            observed_y1_max: 0.0,
            nu1_norm_bound: bounds.nu1_magnitude(sys.state_dim()).norm(),
        })
    }

    pub fn region(&self) -> &ConfidenceRegion {
        &self.region
    }

    pub fn eta_bar(&self) -> f64 {
        self.opts.eta_bar.expect("resolved at construction")
    }

    pub fn record(&mut self, sys: &ParametricLinearSystem, t: f64, y1: &DVector<f64>, y2: &DVector<f64>, u: &DVector<f64>) {
        let (y, phi) = build_regression(sys, y1, y2, u);
        self.stream.push(t, phi, y);
        self.observed_y1_max = self.observed_y1_max.max(y1.norm());
    }

    /// Refresh the region from all data so far; returns the excitation
    /// witness and the error radius when an update was possible.
    pub fn refresh(
        &mut self,
        sys: &ParametricLinearSystem,
        t: f64,
    ) -> (Option<PeWitness>, Option<f64>) {
        if t < self.opts.window || self.stream.len() < 2 {
            return (None, None);
        }
        let witness = match self.opts.vartheta_override {
            Some(v) => PeWitness {
                ell: self.opts.window,
                vartheta: v,
                verified_on: (0.0, t),
            },
            None => {
                // Two sound excitation readings: the windowed scan, and the
                // elapsed-Gramian constant ϑ̂ = 2ℓ·λ_min(G(0,t))/t, which is
                // exactly what the error-bound proof consumes and does not
                // degrade when excitation dies after a rich transient.
                let scan = check_pe(&self.stream, self.opts.window, self.opts.pe_stride);
                let lambda_min =
                    crate::linalg::lambda_min_symmetric(&self.stream.gramian_at(t));
                let elapsed = if lambda_min > 1e-12 {
                    Some(2.0 * self.opts.window * lambda_min / t)
                } else {
                    None
                };
                match (scan, elapsed) {
                    (Ok(w), Some(v)) => PeWitness {
                        vartheta: w.vartheta.max(v),
                        ..w
                    },
                    (Ok(w), None) => w,
                    (Err(_), Some(v)) => PeWitness {
                        ell: self.opts.window,
                        vartheta: v,
                        verified_on: (0.0, t),
                    },
                    (Err(_), None) => return (None, None),
                }
            }
        };
        let theta_hat = match least_squares(
            &self.stream,
            t,
            self.opts.window,
            &self.region.theta_hat().clone(),
        ) {
            Ok(th) => th,
            Err(_) => return (Some(witness), None),
        };
        let x_bound = match self.opts.state_bound_mode {
            StateBoundMode::Configured => self.opts.x_inf_bound,
            StateBoundMode::Observed => self.observed_y1_max + self.nu1_norm_bound,
        };
        let budget = NoiseBudget {
            eta_bar: self.opts.eta_bar.expect("resolved before the loop"),
            x_inf_bound: x_bound,
            nu1_inf_bound: self.nu1_norm_bound,
        };
        let delta = error_bound(&budget, &witness, sys);
        self.region.update(t, &theta_hat, delta);
        (Some(witness), Some(delta))
    }
}

/// Run the full dual-MPC loop and log everything.
pub fn run_receding_horizon(inputs: &RunInputs<'_>) -> Result<ExperimentLog, MpcError> {
    let sys = inputs.sys;
    let p = sys.state_dim();
    let spec = inputs.spec;
    spec.validate(2 * p, sys.control_dim())?;
    inputs
        .bounds
        .validate(sys)
        .map_err(|e| MpcError::Structure(e.to_string()))?;
    inputs
        .constraints
        .validate(sys, inputs.bounds)
        .map_err(|e| MpcError::Structure(e.to_string()))?;
    if !inputs.bounds.initial_box().contains_with_tol(&inputs.x0, 1e-12) {
        return Err(MpcError::Structure(
            "true initial state must lie within the initial-state box".into(),
        ));
    }

    let mut warnings = Vec::new();
    if !inputs.bounds.omega.hi.is_nonincreasing() {
        warnings.push("upper disturbance envelope is not non-increasing".into());
    }
    {
        let widths: Vec<DVector<f64>> = {
            let mut times: Vec<f64> = inputs
                .bounds
                .omega
                .lo
                .breakpoints()
                .iter()
                .chain(inputs.bounds.omega.hi.breakpoints())
                .copied()
                .collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            times
                .iter()
                .map(|&t| inputs.bounds.omega.hi_at(t) - inputs.bounds.omega.lo_at(t))
                .collect()
        };
        if widths
            .windows(2)
            .any(|w| (0..w[0].len()).any(|i| w[1][i] > w[0][i] + 1e-12))
        {
            warnings.push("disturbance envelope width is not non-increasing".into());
        }
    }

    let nu1_mag = inputs.bounds.nu1_magnitude(p);
    let gauge = TerminalGauge {
        cert: inputs.artifacts.cert.clone(),
        transform: inputs.synth_predictor.transform.clone(),
        set: inputs.terminal,
    };
    let mut estimator = OnlineEstimator::new(sys, inputs.bounds, inputs.estimation.clone())
        .map_err(MpcError::Estimation)?;

    let mut log = ExperimentLog {
        rows: Vec::new(),
        replans: Vec::new(),
        violations: ViolationCounts::default(),
        branch_switches: 0,
        time_entered_terminal: None,
        estimator_inconsistent: false,
        warnings,
        level: inputs.terminal.level,
    };

    let steps_per_meas = (inputs.meas_step / inputs.sim_step).round().max(1.0) as usize;
    let steps_per_apply = (spec.apply_time / inputs.sim_step).round().max(1.0) as usize;
    let replans = (inputs.duration / spec.apply_time).round() as usize;

    let mut x = inputs.x0.clone();
    let mut prev_plan: Option<ControlPlan> = None;
    let mut prev_branch: Option<Branch> = None;
    let a_true = sys
        .state_matrix(&inputs.true_theta)
        .map_err(|e| MpcError::Structure(e.to_string()))?;

    let mut global_step = 0usize;
    for replan_idx in 0..replans {
        let t_i = replan_idx as f64 * spec.apply_time;

        // 1. Refresh the confidence region from the data gathered so far.
        let (witness, delta_theta) = estimator.refresh(sys, t_i);
        if estimator.region.inconsistent() {
            log.estimator_inconsistent = true;
        }

        // 2. Rebuild the predictor for the current region.
        let region_box = estimator.region.current().clone();
        let ocp_predictor = match inputs.predictor_mode {
            PredictorMode::Naive => Predictor::naive(sys, &region_box),
            PredictorMode::Enhanced => Predictor::enhanced(sys, &region_box)?,
            PredictorMode::Auto => Predictor::auto(sys, &region_box),
        };

        // 3. Re-anchor both predictors from the measurement at t_i.
        let nu_now = (inputs.noise)(t_i);
        let nu1_now = nu_now.rows(0, p).into_owned();
        let y1 = &x + &nu1_now;
        let anchor_synth = inputs.synth_predictor.anchor(&y1, &nu1_mag, t_i);
        let anchor_ocp = ocp_predictor.anchor(&y1, &nu1_mag, t_i);
        let anchor_value = gauge.cert.value(&anchor_synth.stacked());

        // 4. Switching rule (+ OCP solve when outside the terminal set).
        let in_terminal = anchor_value <= inputs.terminal.level;
        let mut plan_cost = None;
        let mut plan_terminal_value = None;
        let mut warm_start_feasible = None;
        let mut feasible = in_terminal;
        let branch = if in_terminal {
            Branch::Feedback
        } else {
            let ctx = OcpContext {
                predictor: &ocp_predictor,
                gauge: &gauge,
                constraints: inputs.constraints,
                control_rule: &inputs.control_rule,
                omega: &inputs.bounds.omega,
                spec,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ (replan_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            match solve_ocp(&anchor_ocp, &ctx, prev_plan.as_ref(), t_i, &mut rng) {
                Ok(solution) => {
                    feasible = true;
                    plan_cost = Some(solution.plan.cost);
                    warm_start_feasible = solution.warm_start_feasible;
                    let term =
                        IntervalState::from_stacked(&solution.plan.terminal_xi, t_i + spec.horizon);
                    let bridge = gauge.bridge_from(&ocp_predictor);
                    plan_terminal_value = Some(gauge.value_bridged(&bridge, &term));
                    prev_plan = Some(solution.plan);
                    Branch::Plan
                }
                Err(inf) => {
                    return Err(MpcError::ControllerFault {
                        t: t_i,
                        margin: inf.best_margin,
                    });
                }
            }
        };
        if let Some(pb) = prev_branch {
            if pb != branch {
                log.branch_switches += 1;
            }
        }
        prev_branch = Some(branch);
        if in_terminal && log.time_entered_terminal.is_none() {
            log.time_entered_terminal = Some(t_i);
        }
        log.replans.push(ReplanRecord {
            t: t_i,
            branch,
            feasible,
            anchor_value,
            plan_cost,
            plan_terminal_value,
            warm_start_feasible,
            predictor_form: ocp_predictor.form.name(),
            pe_vartheta: witness.as_ref().map(|w| w.vartheta),
            delta_theta,
            region_lo: region_box.lo().clone(),
            region_hi: region_box.hi().clone(),
        });

        // 5. Apply the selected control over [t_i, t_i + τ).
        let mut ocp_state = anchor_ocp;
        let mut synth_state = anchor_synth;
        for k in 0..steps_per_apply {
            let t = t_i + k as f64 * inputs.sim_step;
            let omega_true = (inputs.true_disturbance)(t);
            let omega_lo = inputs.bounds.omega.lo_at(t).clone();
            let omega_hi = inputs.bounds.omega.hi_at(t).clone();
            let delta_synth = inputs.synth_predictor.ext.delta(&omega_lo, &omega_hi);

            // Control at the node (logged, measured, and used for the plant).
            let u = match branch {
                Branch::Plan => prev_plan.as_ref().expect("plan branch has a plan").value_at(t).clone(),
                Branch::Feedback => feedback_control(
                    &inputs.artifacts.gains,
                    &synth_state.stacked(),
                    &delta_synth,
                ),
            };

            // Monitors and logging use the branch-appropriate interval.
            let (phys, v_now) = match branch {
                Branch::Plan => {
                    let ph = ocp_predictor.to_physical(&ocp_state);
                    let bridge = gauge.bridge_from(&ocp_predictor);
                    let v = gauge.value_bridged(&bridge, &ocp_state);
                    (ph, v)
                }
                Branch::Feedback => {
                    let ph = inputs.synth_predictor.to_physical(&synth_state);
                    let v = gauge.cert.value(&synth_state.stacked());
                    (ph, v)
                }
            };
            if inputs.constraints.state.violation(&x) > 1e-9 {
                log.violations.state += 1;
            }
            let u_total_violation = match &inputs.control_rule {
                ControlConstraint::Direct => inputs.constraints.control.violation(&u),
                ControlConstraint::WithStateFeedback { gain, .. } => {
                    let u_total = &u + gain * &y_measured(&x, &nu_at(inputs, t, p));
                    inputs.constraints.control.violation(&u_total)
                }
            };
            if u_total_violation > 1e-9 {
                log.violations.control += 1;
            }
            for i in 0..p {
                if x[i] < phys.lo[i] - 1e-9 || x[i] > phys.hi[i] + 1e-9 {
                    log.violations.inclusion += 1;
                    break;
                }
            }
            if global_step % inputs.log_every == 0 {
                log.rows.push(LogRow {
                    t,
                    x: x.clone(),
                    x_lo: phys.lo.clone(),
                    x_hi: phys.hi.clone(),
                    u: u.clone(),
                    v: v_now,
                    level: inputs.terminal.level,
                    branch,
                    feasible,
                    theta_hat: estimator.region.theta_hat().clone(),
                    theta_box_lo: estimator.region.current().lo().clone(),
                    theta_box_hi: estimator.region.current().hi().clone(),
                });
            }

            // Measurements feed the estimator on the measurement grid.
            if global_step % steps_per_meas == 0 {
                let nu = (inputs.noise)(t);
                let nu1 = nu.rows(0, p).into_owned();
                let nu2 = nu.rows(p, p).into_owned();
                let (y1m, y2m) = crate::model::measure(
                    sys,
                    &inputs.true_theta,
                    &x,
                    &u,
                    &omega_true,
                    &nu1,
                    &nu2,
                );
                estimator.record(sys, t, &y1m, &y2m, &u);
            }

            // Integrate truth and predictors one simulation step.
            match branch {
                Branch::Plan => {
                    let forcing = sys.b() * &u + sys.d() * &omega_true;
                    x = ode::rk4_step(|_t, s| &a_true * s + &forcing, t, &x, inputs.sim_step);
                    ocp_state = ocp_predictor.step(&ocp_state, &u, &omega_lo, &omega_hi, inputs.sim_step)?;
                    synth_state = inputs.synth_predictor.step(
                        &synth_state,
                        &u,
                        &omega_lo,
                        &omega_hi,
                        inputs.sim_step,
                    )?;
                }
                Branch::Feedback => {
                    // Coupled integration: the feedback closes through the
                    // predictor state, so truth and predictor share the same
                    // control signal inside the integrator stages.
                    let n_xi = synth_state.dim() * 2;
                    let mut joint = DVector::zeros(p + n_xi);
                    joint.rows_mut(0, p).copy_from(&x);
                    joint.rows_mut(p, n_xi).copy_from(&synth_state.stacked());
                    let d_omega = sys.d() * &omega_true;
                    let f = |_t: f64, s: &DVector<f64>| {
                        let xs = s.rows(0, p).into_owned();
                        let xis = s.rows(p, n_xi).into_owned();
                        let u_fb =
                            feedback_control(&inputs.artifacts.gains, &xis, &delta_synth);
                        let dx = &a_true * &xs + sys.b() * &u_fb + &d_omega;
                        let dxi = inputs.synth_predictor.ext.rhs(&xis, &u_fb, &delta_synth);
                        let mut out = DVector::zeros(p + n_xi);
                        out.rows_mut(0, p).copy_from(&dx);
                        out.rows_mut(p, n_xi).copy_from(&dxi);
                        out
                    };
                    let next = ode::rk4_step(f, t, &joint, inputs.sim_step);
                    if !ode::is_within_limits(&next) {
                        return Err(MpcError::Prediction(PredictionError::Divergence {
                            t_last: t,
                        }));
                    }
                    x = next.rows(0, p).into_owned();
                    synth_state = IntervalState::from_stacked(
                        &next.rows(p, n_xi).into_owned(),
                        t + inputs.sim_step,
                    );
                    ocp_state = ocp_predictor.step(
                        &ocp_state,
                        &u,
                        &omega_lo,
                        &omega_hi,
                        inputs.sim_step,
                    )?;
                }
            }
            global_step += 1;
        }
        if branch == Branch::Feedback {
            prev_plan = None;
        }
    }
    Ok(log)
}

fn nu_at(inputs: &RunInputs<'_>, t: f64, p: usize) -> DVector<f64> {
    (inputs.noise)(t).rows(0, p).into_owned()
}

fn y_measured(x: &DVector<f64>, nu1: &DVector<f64>) -> DVector<f64> {
    x + nu1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstraintBoxes, ParametricLinearSystem, SignalBounds};
    use crate::prediction::Predictor;
    use crate::signal::Envelope;
    use crate::stabilization::{
        select_s, synthesize_gains, terminal_set, verify_certificate, CertificateVerdict,
        SynthesisConfig,
    };
    use nalgebra::{dmatrix, dvector};

    /// Controlled variant of the scalar demo plant: ẋ = -θx + u + ω.
    fn scalar_sys() -> ParametricLinearSystem {
        ParametricLinearSystem::new(
            dmatrix![0.0],
            vec![dmatrix![-1.0]],
            dmatrix![1.0],
            dmatrix![1.0],
            IntervalBox::scalar(1.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    fn scalar_bounds() -> SignalBounds {
        SignalBounds {
            omega: Envelope::symmetric(dvector![0.05]),
            nu: Envelope::symmetric(dvector![0.05, 0.05]),
            x0_lo: dvector![1.9],
            x0_hi: dvector![2.1],
        }
    }

    fn scalar_constraints() -> ConstraintBoxes {
        ConstraintBoxes {
            state: IntervalBox::scalar(-3.0, 3.0).unwrap(),
            control: IntervalBox::scalar(-10.0, 10.0).unwrap(),
        }
    }

    fn scalar_spec() -> OcpSpec {
        OcpSpec {
            horizon: 3.0,
            apply_time: 0.5,
            w1: DMatrix::identity(2, 2) * 10.0,
            w2: DMatrix::identity(2, 2),
            w3: DMatrix::identity(1, 1) * 0.1,
            segments: 6,
            candidates: 300,
            grid_per_segment: 20,
            seed: 42,
        }
    }

    /// Synthesized artifacts with the level grown to cover the closed-loop
    /// attractor, mirroring what a scenario setup does.
    fn scalar_artifacts(
        predictor: &Predictor,
        bounds: &SignalBounds,
    ) -> (StabilizationArtifacts, TerminalSet) {
        let cfg = SynthesisConfig {
            budget: 30_000,
            restarts: 2,
            seed: 7,
            ..Default::default()
        };
        let (mut gains, cert) = synthesize_gains(&predictor.ext, &cfg).unwrap();
        gains.s = select_s(&predictor.ext.b);
        let mut artifacts = StabilizationArtifacts { gains, cert };

        let mut state = predictor.anchor(&dvector![0.0], &dvector![0.05], 0.0);
        for _ in 0..20_000 {
            let u = feedback_control(
                &artifacts.gains,
                &state.stacked(),
                &predictor.ext.delta(bounds.omega.lo_at(0.0), bounds.omega.hi_at(0.0)),
            );
            state = predictor
                .step(&state, &u, bounds.omega.lo_at(0.0), bounds.omega.hi_at(0.0), 1e-3)
                .unwrap();
        }
        let v_att = artifacts.cert.value(&state.stacked());

        let delta_box = predictor.ext.delta_box(&bounds.omega);
        let dt_box =
            crate::stabilization::delta_tilde_box(&predictor.ext, &artifacts.gains.s, &delta_box);
        let mut terminal = terminal_set(&artifacts.cert, &dt_box);
        let needed = 1.4 * v_att;
        if terminal.level < needed && terminal.level > 0.0 {
            let mut scaled = artifacts.cert.clone();
            scaled.gamma *= needed / terminal.level;
            if let CertificateVerdict::Valid { alpha, .. } =
                verify_certificate(&predictor.ext, &artifacts.gains, &scaled)
            {
                scaled.alpha = alpha;
                artifacts.cert = scaled;
                terminal = terminal_set(&artifacts.cert, &dt_box);
            }
        }
        (artifacts, terminal)
    }

    #[test]
    fn spec_validation() {
        let mut spec = scalar_spec();
        assert!(spec.validate(2, 1).is_ok());
        spec.apply_time = 3.5;
        assert!(spec.validate(2, 1).is_err());
        let mut spec = scalar_spec();
        spec.apply_time = 0.4; // not a multiple of T/K = 0.5
        assert!(spec.validate(2, 1).is_err());
        let mut spec = scalar_spec();
        spec.w2 = dmatrix![1.0, 5.0; -5.0, 1.0];
        assert!(spec.validate(2, 1).is_err());
    }

    #[test]
    fn evaluate_plan_examples() {
        let sys = scalar_sys();
        let predictor = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
        let bounds = scalar_bounds();
        let constraints = scalar_constraints();
        let spec = scalar_spec();
        let (artifacts, terminal) = scalar_artifacts(&predictor, &bounds);
        let gauge = TerminalGauge {
            cert: artifacts.cert.clone(),
            transform: predictor.transform.clone(),
            set: terminal,
        };

        // Zero state, zero input, no disturbance: zero cost, feasible.
        let no_dist = Envelope::zero(1);
        let ctx0 = OcpContext {
            predictor: &predictor,
            gauge: &gauge,
            constraints: &constraints,
            control_rule: &ControlConstraint::Direct,
            omega: &no_dist,
            spec: &spec,
        };
        let zero_state = IntervalState::new(dvector![0.0], dvector![0.0], 0.0).unwrap();
        let ev = evaluate_plan(&ControlPlan::zero(0.0, &spec, 1), &zero_state, &ctx0);
        assert!(ev.feasible);
        assert!(ev.cost.abs() < 1e-12);

        // Initial interval outside the state box: infeasible immediately.
        let outside = IntervalState::new(dvector![3.5], dvector![3.6], 0.0).unwrap();
        let ev = evaluate_plan(&ControlPlan::zero(0.0, &spec, 1), &outside, &ctx0);
        assert!(!ev.feasible);
        assert!(ev.margin >= 0.5);

        // Single-segment plan: cost matches an independent fine-grid
        // quadrature within 1e-4.
        let mut spec1 = scalar_spec();
        spec1.segments = 1;
        spec1.apply_time = 1.5;
        spec1.grid_per_segment = 300;
        let ctx1 = OcpContext {
            spec: &spec1,
            ..ctx0
        };
        let state = IntervalState::new(dvector![0.9], dvector![1.1], 0.0).unwrap();
        let plan = ControlPlan {
            t_start: 0.0,
            segment_len: spec1.segment_len(),
            values: vec![dvector![-0.7]],
            cost: f64::INFINITY,
            feasible: false,
            terminal_xi: DVector::zeros(0),
        };
        let ev = evaluate_plan(&plan, &state, &ctx1);

        // Oracle: same trajectory on a 10x finer grid, trapezoid quadrature.
        let mut fine = spec1.clone();
        fine.grid_per_segment = 3000;
        let ctx_fine = OcpContext {
            spec: &fine,
            ..ctx1
        };
        let ev_fine = evaluate_plan(&plan, &state, &ctx_fine);
        assert!(
            (ev.cost - ev_fine.cost).abs() < 1e-4,
            "{} vs {}",
            ev.cost,
            ev_fine.cost
        );
    }

    #[test]
    fn solve_ocp_prefers_cheap_feasible_plans() {
        let sys = scalar_sys();
        let predictor = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
        let bounds = scalar_bounds();
        let constraints = scalar_constraints();
        let spec = scalar_spec();
        let (artifacts, terminal) = scalar_artifacts(&predictor, &bounds);
        let gauge = TerminalGauge {
            cert: artifacts.cert.clone(),
            transform: predictor.transform.clone(),
            set: terminal,
        };
        let ctx = OcpContext {
            predictor: &predictor,
            gauge: &gauge,
            constraints: &constraints,
            control_rule: &ControlConstraint::Direct,
            omega: &bounds.omega,
            spec: &spec,
        };
        // Deep inside the terminal set: feasible, and no candidate beats the
        // zero plan by more than sampling luck allows.
        let state = predictor.anchor(&dvector![0.02], &dvector![0.05], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sol = solve_ocp(&state, &ctx, None, 0.0, &mut rng).unwrap();
        assert!(sol.zero_plan_feasible);
        let zero_ev = evaluate_plan(&ControlPlan::zero(0.0, &spec, 1), &state, &ctx);
        assert!(sol.plan.cost <= zero_ev.cost + 1e-12);
    }

    #[test]
    fn solve_ocp_reports_infeasibility() {
        // Unstable uncontrolled drift with a tight state box: nothing is
        // feasible.
        let sys = ParametricLinearSystem::new(
            dmatrix![0.5],
            vec![dmatrix![0.0]],
            DMatrix::zeros(1, 1),
            dmatrix![1.0],
            IntervalBox::scalar(-0.1, 0.1).unwrap(),
        )
        .unwrap();
        let predictor = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
        let bounds = SignalBounds {
            omega: Envelope::symmetric(dvector![0.01]),
            nu: Envelope::symmetric(dvector![0.01, 0.01]),
            x0_lo: dvector![2.0],
            x0_hi: dvector![2.0],
        };
        let constraints = ConstraintBoxes {
            state: IntervalBox::scalar(-2.5, 2.5).unwrap(),
            control: IntervalBox::scalar(-1.0, 1.0).unwrap(),
        };
        let mut spec = scalar_spec();
        spec.candidates = 1;
        let cert = crate::stabilization::LyapunovCertificate {
            p: dvector![1.0, 1.0],
            q: dvector![1.0, 1.0],
            q_plus: DVector::zeros(2),
            q_minus: DVector::zeros(2),
            z_plus: DVector::zeros(2),
            z_minus: DVector::zeros(2),
            psi_plus: DVector::zeros(2),
            psi_minus: DVector::zeros(2),
            psi: DVector::zeros(2),
            gamma: dvector![1.0, 1.0],
            alpha: 1.0,
        };
        let gauge = TerminalGauge {
            cert,
            transform: predictor.transform.clone(),
            set: TerminalSet { level: 1e-6 },
        };
        let ctx = OcpContext {
            predictor: &predictor,
            gauge: &gauge,
            constraints: &constraints,
            control_rule: &ControlConstraint::Direct,
            omega: &bounds.omega,
            spec: &spec,
        };
        let state = predictor.anchor(&dvector![2.0], &dvector![0.01], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = solve_ocp(&state, &ctx, None, 0.0, &mut rng).unwrap_err();
        assert!(err.best_margin > 0.0);
    }

    #[test]
    fn warm_start_survives_region_shrink() {
        let sys = scalar_sys();
        let bounds = scalar_bounds();
        let constraints = scalar_constraints();
        let spec = scalar_spec();
        let full = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
        let (artifacts, terminal) = scalar_artifacts(&full, &bounds);
        let gauge = TerminalGauge {
            cert: artifacts.cert.clone(),
            transform: full.transform.clone(),
            set: terminal,
        };
        let ctx = OcpContext {
            predictor: &full,
            gauge: &gauge,
            constraints: &constraints,
            control_rule: &ControlConstraint::Direct,
            omega: &bounds.omega,
            spec: &spec,
        };
        let anchor = full.anchor(&dvector![2.0], &dvector![0.05], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sol = solve_ocp(&anchor, &ctx, None, 0.0, &mut rng).unwrap();

        // Region shrank between replans; the τ-shifted remainder of the old
        // plan must stay feasible (re-evaluation oracle).
        let shrunk = IntervalBox::scalar(1.2, 1.8).unwrap();
        let tighter = Predictor::enhanced(&sys, &shrunk).unwrap();
        let ctx2 = OcpContext {
            predictor: &tighter,
            ..ctx
        };
        // Simulate the plant under the chosen plan for τ and re-anchor.
        let theta = dvector![1.5];
        let plan = sol.plan.clone();
        let trace = crate::model::simulate_plant(
            &sys,
            &theta,
            |_| dvector![0.03],
            |t| plan.value_at(t).clone(),
            &dvector![2.0],
            spec.apply_time,
            1e-3,
        )
        .unwrap();
        let x_tau = trace.states.last().unwrap().clone();
        let anchor2 = tighter.anchor(&x_tau, &dvector![0.05], spec.apply_time);
        let shifted = sol.plan.shifted(spec.apply_time, spec.shift_segments());
        let ev = evaluate_plan(&shifted, &anchor2, &ctx2);
        assert!(ev.feasible, "margin = {}", ev.margin);
    }

    #[test]
    fn switching_rule_cases() {
        let terminal = TerminalSet { level: 1.0 };
        // Inside: feedback.
        assert_eq!(switching_control(0.5, &terminal, true).unwrap(), Branch::Feedback);
        // Outside with a plan: plan.
        assert_eq!(switching_control(1.5, &terminal, true).unwrap(), Branch::Plan);
        // Boundary resolves to feedback (membership is ≤).
        assert_eq!(switching_control(1.0, &terminal, false).unwrap(), Branch::Feedback);
        // Outside without a plan: fault.
        assert!(switching_control(1.5, &terminal, false).is_err());
    }

    #[test]
    fn receding_horizon_scalar_run() {
        let sys = scalar_sys();
        let bounds = scalar_bounds();
        let constraints = scalar_constraints();
        let spec = scalar_spec();
        let predictor = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
        let (artifacts, terminal) = scalar_artifacts(&predictor, &bounds);

        use rand::Rng;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(77);
        let noise_vals: Vec<(f64, f64, f64)> = (0..2000)
            .map(|_| {
                (
                    noise_rng.gen_range(-0.05..0.05),
                    noise_rng.gen_range(-0.05..0.05),
                    noise_rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let lookup = move |t: f64| {
            let k = ((t / 0.01) as usize).min(1999);
            noise_vals[k]
        };
        let noise = {
            let lookup = lookup.clone();
            move |t: f64| {
                let (n1, n2, _) = lookup(t);
                dvector![n1, n2]
            }
        };
        let dist = move |t: f64| {
            let (_, _, w) = lookup(t);
            dvector![w]
        };

        let inputs = RunInputs {
            sys: &sys,
            true_theta: dvector![1.3],
            x0: dvector![2.0],
            bounds: &bounds,
            constraints: &constraints,
            spec: &spec,
            estimation: EstimationOptions {
                window: 1.0,
                eta_bar: None,
                x_inf_bound: 2.5,
                state_bound_mode: StateBoundMode::Observed,
                pe_stride: 0.25,
                vartheta_override: None,
            },
            artifacts: &artifacts,
            synth_predictor: &predictor,
            terminal,
            control_rule: ControlConstraint::Direct,
            predictor_mode: PredictorMode::Auto,
            duration: 8.0,
            sim_step: 1e-3,
            meas_step: 1e-2,
            log_every: 10,
            true_disturbance: &dist,
            noise: &noise,
        };
        let log = run_receding_horizon(&inputs).unwrap();

        // Reaches the terminal set, switches exactly once, keeps every
        // constraint, and the true state never escapes the logged interval.
        assert!(log.time_entered_terminal.is_some());
        assert_eq!(log.branch_switches, 1);
        assert_eq!(log.violations.state, 0);
        assert_eq!(log.violations.control, 0);
        assert_eq!(log.violations.inclusion, 0);
        // Terminal invariance: after entry every replan stays in the set.
        let entry = log.time_entered_terminal.unwrap();
        for r in &log.replans {
            if r.t >= entry {
                assert_eq!(r.branch, Branch::Feedback);
                assert!(r.anchor_value <= log.level + 1e-9);
            }
        }
        // Recursive feasibility (with warm starts verified where present).
        let first_feasible = log.replans.iter().position(|r| r.feasible).unwrap();
        for r in &log.replans[first_feasible..] {
            assert!(r.feasible);
            if let Some(ws) = r.warm_start_feasible {
                assert!(ws);
            }
        }
        // The confidence region stayed sound and shrink-only.
        let mut prev_width = f64::INFINITY;
        for r in &log.replans {
            assert!(r.region_lo[0] - 1e-9 <= 1.3 && 1.3 <= r.region_hi[0] + 1e-9);
            let w = r.region_hi[0] - r.region_lo[0];
            assert!(w <= prev_width + 1e-12);
            prev_width = w;
        }
        assert!(!log.estimator_inconsistent);
    }

    #[test]
    fn csv_schema_and_determinism() {
        // Two identical runs serialize to byte-identical CSV.
        let run = || {
            let sys = scalar_sys();
            let bounds = scalar_bounds();
            let constraints = scalar_constraints();
            let mut spec = scalar_spec();
            spec.candidates = 50;
            let predictor = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
            let (artifacts, terminal) = scalar_artifacts(&predictor, &bounds);
            let noise = |_t: f64| dvector![0.01, -0.01];
            let dist = |_t: f64| dvector![0.02];
            let inputs = RunInputs {
                sys: &sys,
                true_theta: dvector![1.7],
                x0: dvector![2.0],
                bounds: &bounds,
                constraints: &constraints,
                spec: &spec,
                estimation: EstimationOptions {
                    window: 1.0,
                    eta_bar: None,
                    x_inf_bound: 2.5,
                    state_bound_mode: StateBoundMode::Configured,
                    pe_stride: 0.25,
                    vartheta_override: None,
                },
                artifacts: &artifacts,
                synth_predictor: &predictor,
                terminal,
                control_rule: ControlConstraint::Direct,
                predictor_mode: PredictorMode::Auto,
                duration: 2.0,
                sim_step: 1e-3,
                meas_step: 1e-2,
                log_every: 50,
                true_disturbance: &dist,
                noise: &noise,
            };
            let log = run_receding_horizon(&inputs).unwrap();
            let mut out = Vec::new();
            log.write_csv(&mut out).unwrap();
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "t,x1,x_lo1,x_hi1,u1,V,level,branch,feasible,theta_hat1,theta_box_lo1,theta_box_hi1"
        );
    }
}
