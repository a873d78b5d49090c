//! Lane-keeping instantiation: dynamic bicycle model with unknown tire
//! friction driven by the dual MPC.
//!
//! The tracked state is the lane-frame error `x̃ = (p_y - y_r, ψ, v_y, r)`;
//! the untracked reference terms enter as a bounded disturbance. A
//! preliminary pole-shifting feedback is folded into the plant so the center
//! matrix acquires a real, distinct, negative spectrum (the enhanced
//! predictor's Metzler route) and its control consumption is budgeted out of
//! the control constraint.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::block_matrix;
use crate::model::{ConstraintBoxes, ModelError, ParametricLinearSystem, SignalBounds};
use crate::mpc::{
    run_receding_horizon, ControlConstraint, EstimationOptions, ExperimentLog, MpcError, OcpSpec,
    PredictorMode, RunInputs,
};
use crate::prediction::{Predictor, PredictionError};
use crate::sets::IntervalBox;
use crate::signal::{Envelope, PiecewiseConstant};
use crate::stabilization::{
    check_terminal_constraints, delta_tilde_box, minimize_gamma, select_s,
    synthesize_certificate_shaped, synthesize_gains, terminal_set, verify_certificate,
    CertificateVerdict, StabilizationArtifacts, StabilizationError, StateFeedbackBudget,
    SynthesisConfig, TerminalConstraintReport, TerminalSet, TerminalShaping,
};

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("longitudinal speed must be positive")]
    ZeroSpeed,
    #[error("pole placement failed: {0}")]
    PolePlacement(String),
    #[error("{0}")]
    Prediction(#[from] PredictionError),
    #[error("{0}")]
    Stabilization(#[from] StabilizationError),
    #[error("{0}")]
    Mpc(#[from] MpcError),
}

/// Physical parameters of the bicycle model. Units are Mg, m, s and kN, so a
/// mid-size sedan has mass ≈ 1.5 and tire stiffness of a few tens of kN/rad.
#[derive(Debug, Clone)]
pub struct BicycleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    /// Distance from the center of mass to the front axle.
    pub dist_front: f64,
    /// Distance from the center of mass to the rear axle.
    pub dist_rear: f64,
    /// Constant longitudinal speed.
    pub speed: f64,
    /// True (simulated) front/rear cornering stiffness.
    pub true_friction: DVector<f64>,
    /// Prior box for the unknown stiffness pair.
    pub friction_box: IntervalBox,
}

impl BicycleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        if self.speed <= 0.0 {
            return Err(VehicleError::ZeroSpeed);
        }
        if self.mass <= 0.0
            || self.yaw_inertia <= 0.0
            || self.dist_front <= 0.0
            || self.dist_rear <= 0.0
        {
            return Err(VehicleError::PolePlacement(
                "physical parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Lateral dynamics `x = (p_y, ψ, v_y, r)` with the friction pair as the
/// unknown parameter vector. The disturbance matrix is the identity: every
/// state channel can absorb reference-induced perturbation.
pub fn build_bicycle_model(params: &BicycleParams) -> Result<ParametricLinearSystem, VehicleError> {
    params.validate()?;
    let (m, iz) = (params.mass, params.yaw_inertia);
    let (a, b) = (params.dist_front, params.dist_rear);
    let vx = params.speed;
    let a_nominal = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, vx, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 0.0, -vx, //
            0.0, 0.0, 0.0, 0.0,
        ],
    );
    let scale = -2.0 / (m * vx * iz);
    let phi_front = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, iz, a * iz, //
            0.0, 0.0, a * m, a * a * m,
        ],
    ) * scale;
    let phi_rear = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, iz, -b * iz, //
            0.0, 0.0, -b * m, b * b * m,
        ],
    ) * scale;
    let b_col = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 2.0 / m, a / iz]);
    Ok(ParametricLinearSystem::new(
        a_nominal,
        vec![phi_front, phi_rear],
        b_col,
        DMatrix::identity(4, 4),
        params.friction_box.clone(),
    )?)
}

/// Smoothed lane-change reference `y_r(t) = amplitude·σ(steepness·(t - center))`.
#[derive(Debug, Clone, Copy)]
pub struct LaneReference {
    pub amplitude: f64,
    pub steepness: f64,
    pub center_time: f64,
}

impl LaneReference {
    pub fn zero() -> Self {
        Self {
            amplitude: 0.0,
            steepness: 1.0,
            center_time: 0.0,
        }
    }

    pub fn position(&self, t: f64) -> f64 {
        self.amplitude / (1.0 + (-self.steepness * (t - self.center_time)).exp())
    }

    pub fn slope(&self, t: f64) -> f64 {
        let s = 1.0 / (1.0 + (-self.steepness * (t - self.center_time)).exp());
        self.amplitude * self.steepness * s * (1.0 - s)
    }

    /// `sup_t |ẏ_r|`, attained at the sigmoid center.
    pub fn slope_bound(&self) -> f64 {
        (self.amplitude * self.steepness / 4.0).abs()
    }
}

/// Ackermann pole placement for a single-input pair `(A, b)`: returns the
/// row gain `K` such that `A + bK` has the desired (real, distinct) spectrum.
pub fn pole_placement_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    desired: &[f64],
) -> Result<DMatrix<f64>, VehicleError> {
    let p = a.nrows();
    if desired.len() != p || b.ncols() != 1 {
        return Err(VehicleError::PolePlacement(
            "need one pole per state and a single input column".into(),
        ));
    }
    // Controllability matrix [b, Ab, ..., A^{p-1}b].
    let mut ctrb = DMatrix::zeros(p, p);
    let mut col = b.column(0).into_owned();
    for j in 0..p {
        ctrb.set_column(j, &col);
        col = a * &col;
    }
    let inv = ctrb.clone().try_inverse().ok_or_else(|| {
        VehicleError::PolePlacement("system is not controllable".into())
    })?;
    // χ_des(A) = Π (A - λᵢ I).
    let mut chi = DMatrix::identity(p, p);
    for &lambda in desired {
        chi = chi * (a - DMatrix::identity(p, p) * lambda);
    }
    let last_row = inv.row(p - 1).into_owned();
    let k_ack = last_row * chi;
    let mut gain = DMatrix::zeros(1, p);
    gain.row_mut(0).copy_from(&(-k_ack));
    Ok(gain)
}

/// Full description of a lane-keeping run.
#[derive(Debug, Clone)]
pub struct LaneKeepingConfig {
    pub params: BicycleParams,
    pub reference: LaneReference,
    /// Symmetric state constraint magnitudes (p_y, ψ, v_y, r).
    pub state_bound: DVector<f64>,
    /// Symmetric total-steering bound.
    pub control_bound: f64,
    /// Desired closed-loop poles of the preliminary feedback.
    pub pre_poles: Vec<f64>,
    /// Componentwise measurement-noise magnitudes for ν₁ and ν₂.
    pub nu1_mag: DVector<f64>,
    pub nu2_mag: DVector<f64>,
    /// Extra process-noise magnitude per state channel (on top of the
    /// reference-induced term).
    pub process_noise_mag: DVector<f64>,
    /// Initial tracking-error state and its uncertainty box half-width.
    pub x0: DVector<f64>,
    pub x0_slack: DVector<f64>,
    pub ocp: OcpSpec,
    pub estimation: EstimationOptions,
    pub synthesis: SynthesisConfig,
    /// Optional pre-computed certificate (skips synthesis).
    pub artifacts: Option<StabilizationArtifacts>,
    /// Fraction of the state box the terminal ellipsoid may occupy.
    pub terminal_safety: f64,
    pub duration: f64,
    pub sim_step: f64,
    pub meas_step: f64,
    pub log_every: usize,
    pub noise_seed: u64,
}

/// Everything the scenario fixed before the closed loop ran, for reuse by
/// callers (certificate reports, acceptance checks).
pub struct ScenarioArtifacts {
    pub sys: ParametricLinearSystem,
    pub pre_gain: DMatrix<f64>,
    pub artifacts: StabilizationArtifacts,
    pub terminal: TerminalSet,
    pub constraint_report: TerminalConstraintReport,
    pub predictor_form: &'static str,
    pub bounds: SignalBounds,
    pub constraints: ConstraintBoxes,
}

#[derive(Debug, Clone)]
pub struct ScenarioSummary {
    pub time_entered_terminal: Option<f64>,
    pub branch_switches: usize,
    pub state_violations: usize,
    pub control_violations: usize,
    pub inclusion_violations: usize,
    pub max_abs_state: DVector<f64>,
    pub final_region_lo: DVector<f64>,
    pub final_region_hi: DVector<f64>,
    pub level: f64,
    pub predictor_form: &'static str,
}

impl ScenarioSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "time_entered_terminal {}\n",
            self.time_entered_terminal
                .map_or("never".to_string(), |t| format!("{t:?}"))
        ));
        out.push_str(&format!("branch_switches {}\n", self.branch_switches));
        out.push_str(&format!("state_violations {}\n", self.state_violations));
        out.push_str(&format!("control_violations {}\n", self.control_violations));
        out.push_str(&format!(
            "inclusion_violations {}\n",
            self.inclusion_violations
        ));
        let fmt = |v: &DVector<f64>| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        out.push_str(&format!("max_abs_state {}\n", fmt(&self.max_abs_state)));
        out.push_str(&format!("final_region_lo {}\n", fmt(&self.final_region_lo)));
        out.push_str(&format!("final_region_hi {}\n", fmt(&self.final_region_hi)));
        out.push_str(&format!("terminal_level {:?}\n", self.level));
        out.push_str(&format!("predictor {}\n", self.predictor_form));
        out
    }
}

/// Build the compensated plant, synthesize (or load) the terminal
/// controller, and compute the terminal set and its constraint report.
///
/// Synthesis runs a schedule of shaped certificate searches: a cap on Γ
/// normalizes the certificate scale, a decay-rate floor and a directional
/// floor on the Lyapunov matrix bound the terminal ellipsoid's physical
/// extents, and a minimal-Γ refinement shrinks the level afterwards. The
/// first certificate whose terminal set passes the conclusive constraint
/// check and is re-enterable from measurement anchors wins.
pub fn prepare_scenario(cfg: &LaneKeepingConfig) -> Result<ScenarioArtifacts, VehicleError> {
    let raw = build_bicycle_model(&cfg.params)?;
    let center = cfg.params.friction_box.center();
    let a_center = raw.state_matrix_unchecked(&center);
    let pre_gain = pole_placement_gain(&a_center, raw.b(), &cfg.pre_poles)?;

    // Fold the preliminary feedback into the nominal matrix and append its
    // measurement-noise leakage as an extra disturbance channel:
    // ẋ = (A(θ) + BK_pre)x + Bv + [I₄ | B]·(ω; K_pre ν₁).
    let a_comp = raw.a_nominal() + raw.b() * &pre_gain;
    let d_eff = block_matrix(&[&[&DMatrix::identity(4, 4), raw.b()]]);
    let sys = raw.with_a_nominal(a_comp)?.with_d(d_eff)?;

    // Disturbance envelopes: reference slope plus process noise on the four
    // state channels, and the K_pre·ν₁ leakage on the fifth.
    let slope = cfg.reference.slope_bound();
    let mut base_mag = cfg.process_noise_mag.clone();
    base_mag[0] += slope;
    let pre_leak = (pre_gain.map(f64::abs) * &cfg.nu1_mag)[(0, 0)];
    let omega_env = Envelope::symmetric(base_mag.clone())
        .stack(&Envelope::symmetric(DVector::from_element(1, pre_leak)));

    let nu_mag = DVector::from_iterator(8, cfg.nu1_mag.iter().chain(cfg.nu2_mag.iter()).copied());
    let bounds = SignalBounds {
        omega: omega_env,
        nu: Envelope::symmetric(nu_mag),
        x0_lo: &cfg.x0 - &cfg.x0_slack,
        x0_hi: &cfg.x0 + &cfg.x0_slack,
    };
    let constraints = ConstraintBoxes {
        state: IntervalBox::symmetric(&cfg.state_bound).expect("state bound"),
        control: IntervalBox::scalar(-cfg.control_bound, cfg.control_bound).expect("control bound"),
    };

    // Certificate system: full prior box, enhanced route.
    let synth_predictor = Predictor::enhanced(&sys, sys.theta_set())?;
    let predictor_form = synth_predictor.form.name();
    let ext = &synth_predictor.ext;
    let n = ext.state_dim();
    let delta_box = ext.delta_box(&bounds.omega);
    let s_gain = select_s(&ext.b);
    let dt_box = delta_tilde_box(ext, &s_gain, &delta_box);

    let finish = |artifacts: StabilizationArtifacts,
                  terminal: TerminalSet,
                  report: TerminalConstraintReport| ScenarioArtifacts {
        sys: sys.clone(),
        pre_gain: pre_gain.clone(),
        artifacts,
        terminal,
        constraint_report: report,
        predictor_form,
        bounds: bounds.clone(),
        constraints: constraints.clone(),
    };

    let pre_budget = StateFeedbackBudget {
        gain: pre_gain.clone(),
        nu1_mag: cfg.nu1_mag.clone(),
    };
    let check = |artifacts: &StabilizationArtifacts, terminal: &TerminalSet| {
        check_terminal_constraints(
            &artifacts.cert,
            &artifacts.gains,
            terminal,
            &synth_predictor.transform,
            &constraints.state,
            &constraints.control,
            &delta_box,
            Some(&pre_budget),
            10_000,
            cfg.noise_seed ^ 0xA55A,
        )
    };

    // Anchor value near the origin: the terminal set must swallow the
    // measurement-width interval, otherwise the switch can never latch.
    let anchor_value = |cert: &crate::stabilization::LyapunovCertificate| {
        let anchor = synth_predictor.anchor(&DVector::zeros(4), &cfg.nu1_mag, 0.0);
        cert.value(&anchor.stacked())
    };

    if let Some(provided) = &cfg.artifacts {
        let mut artifacts = provided.clone();
        match verify_certificate(ext, &artifacts.gains, &artifacts.cert) {
            CertificateVerdict::Valid { alpha, .. } => artifacts.cert.alpha = alpha,
            CertificateVerdict::Invalid(issues) => {
                return Err(VehicleError::Stabilization(StabilizationError::Structure(
                    format!("supplied certificate is invalid: {issues:?}"),
                )))
            }
        }
        let terminal = terminal_set(&artifacts.cert, &dt_box);
        let report = check(&artifacts, &terminal);
        return Ok(finish(artifacts, terminal, report));
    }

    // The terminal set must contain the closed-loop attractor but stay small
    // enough that the preliminary feedback's worst-case share over it fits
    // the steering budget. Measure the attractor by simulating the zero-gain
    // predictor from a measurement-width anchor.
    let (attractor, attractor_state) = {
        let mut state = synth_predictor.anchor(&DVector::zeros(4), &cfg.nu1_mag, 0.0);
        let h = 2e-3;
        for _ in 0..(30.0 / h) as usize {
            state = synth_predictor.step(
                &state,
                &DVector::zeros(ext.control_dim()),
                bounds.omega.lo_at(0.0),
                bounds.omega.hi_at(0.0),
                h,
            )?;
        }
        let phys = synth_predictor.to_physical(&state);
        (
            DVector::from_fn(4, |i, _| phys.lo[i].abs().max(phys.hi[i].abs())),
            state,
        )
    };

    let map = synth_predictor.transform.stacked_to_physical_matrix();
    let safety = cfg.terminal_safety.clamp(0.1, 0.95);
    let sup_unit_gamma: f64 = dt_box
        .hi()
        .iter()
        .zip(dt_box.lo().iter())
        .map(|(h, l)| h.abs().max(l.abs()).powi(2))
        .sum();
    let zero_gains = crate::stabilization::FeedbackGains::zero(n, ext.control_dim());

    let mut best_fallback: Option<(StabilizationArtifacts, TerminalSet, TerminalConstraintReport)> =
        None;
    // Per-axis extent targets b̃: start just above the attractor (the
    // terminal set cannot be smaller) and distribute the remaining steering
    // budget of the preliminary feedback evenly across the axes, so that
    // extents within the targets keep `Σ|K_pre|ᵢ·extentᵢ` inside the control
    // box by construction. Directional weights w_j = Σ_i (map_ij / b̃_i)²
    // plus the Γ cap then bound the terminal ellipsoid accordingly (the
    // exact constraint check still decides).
    let s_reach = {
        let s_center = (&s_gain * dt_box.center()).map(f64::abs);
        let s_radius = s_gain.map(f64::abs) * delta_box.radii();
        s_center[(0, 0)] + s_radius[(0, 0)]
    };
    let base_cost: f64 = (0..4)
        .map(|i| pre_gain[(0, i)].abs() * (attractor[i] * 1.15 + cfg.nu1_mag[i]))
        .sum();
    let mut schedule = Vec::new();
    for headroom_frac in [0.85, 0.6] {
        for alpha_target in [0.3, 0.15, 0.08] {
            for cap_scale in [8.0, 24.0, 72.0, 216.0, 648.0] {
                schedule.push((headroom_frac, alpha_target, cap_scale));
            }
        }
    }
    for (headroom_frac, alpha_target, cap_scale) in schedule {
        let headroom =
            (headroom_frac * cfg.control_bound - s_reach - base_cost).max(0.0);
        let target = DVector::from_fn(4, |i, _| {
            (attractor[i] * 1.15 + 0.25 * headroom / pre_gain[(0, i)].abs().max(1e-6))
                .min(cfg.state_bound[i] * safety)
        });
        let stacked_target = DVector::from_fn(n, |i, _| target[if i < 4 { i } else { i - 4 }]);
        let weights = DVector::from_fn(n, |j, _| {
            let mut acc = 0.0;
            for i in 0..n {
                let r = map[(i, j)] / stacked_target[i];
                acc += r * r;
            }
            acc
        });
        let kappa = 1.0 / weights.max().max(1e-12);
        let gamma_cap =
            cap_scale * alpha_target * kappa / (n as f64 * sup_unit_gamma.max(1e-12));
        let shaping = TerminalShaping {
            gamma_cap,
            alpha_target,
            p_lo_floor: &weights * kappa,
            sandwich_ratio: 2.5,
        };
        let cert = match synthesize_certificate_shaped(ext, &zero_gains, &cfg.synthesis, &shaping) {
            Ok(c) => c,
            Err(e) => {
                if std::env::var("AMPC_DEBUG_SCENARIO").is_ok() {
                    eprintln!("[shaped h={headroom_frac} t={alpha_target} cap={gamma_cap:.3}] {e}");
                }
                continue;
            }
        };
        let mut gains = zero_gains.clone();
        gains.s = s_gain.clone();
        let mut artifacts = StabilizationArtifacts { gains, cert };
        if let Some(refined) = minimize_gamma(ext, &artifacts.gains, &artifacts.cert) {
            artifacts.cert = refined;
        }
        // Enterability: grow Γ (always sound) until the level dominates both
        // the anchor value and the attractor value with margin — otherwise
        // the open-loop problem can never satisfy the terminal constraint.
        let mut terminal = terminal_set(&artifacts.cert, &dt_box);
        let needed = (4.0 * anchor_value(&artifacts.cert))
            .max(1.35 * artifacts.cert.value(&attractor_state.stacked()));
        if terminal.level > 0.0 && terminal.level < needed {
            let mut scaled = artifacts.cert.clone();
            scaled.gamma *= needed / terminal.level;
            if let CertificateVerdict::Valid { alpha, .. } =
                verify_certificate(ext, &artifacts.gains, &scaled)
            {
                scaled.alpha = alpha;
                artifacts.cert = scaled;
                terminal = terminal_set(&artifacts.cert, &dt_box);
            }
        }
        let report = check(&artifacts, &terminal);
        let enterable = terminal.level > 2.0 * anchor_value(&artifacts.cert)
            && terminal.level > 1.2 * artifacts.cert.value(&attractor_state.stacked());
        if std::env::var("AMPC_DEBUG_SCENARIO").is_ok() {
            eprintln!(
                "[shaped h={headroom_frac} t={alpha_target} cap={gamma_cap:.3}] level={:.4} alpha={:.4} conclusive={} enterable={} margins=({:.3},{:.3})",
                terminal.level, artifacts.cert.alpha, report.conclusive, enterable,
                report.state_margin, report.control_margin
            );
        }
        if report.conclusive && enterable {
            return Ok(finish(artifacts, terminal, report));
        }
        if best_fallback.is_none() {
            best_fallback = Some((artifacts, terminal, report));
        }
    }

    // Last resort: an unshaped certificate (reported as non-conclusive when
    // the constraint check fails; the acceptance suite flags it).
    if let Some((artifacts, terminal, report)) = best_fallback {
        return Ok(finish(artifacts, terminal, report));
    }
    let (mut gains, cert) = synthesize_gains(ext, &cfg.synthesis)?;
    gains.s = s_gain;
    let artifacts = StabilizationArtifacts { gains, cert };
    let terminal = terminal_set(&artifacts.cert, &dt_box);
    let report = check(&artifacts, &terminal);
    Ok(finish(artifacts, terminal, report))
}

/// Physical-axis extents of the outer ellipsoid of the terminal set.
pub fn terminal_physical_extents(
    cert: &crate::stabilization::LyapunovCertificate,
    terminal: &TerminalSet,
    transform: &crate::prediction::MetzlerTransform,
) -> DVector<f64> {
    let n = cert.dim();
    let p_lo = cert.p_lower();
    let map = transform.stacked_to_physical_matrix();
    DVector::from_fn(n, |i, _| {
        let mut quad = 0.0;
        for j in 0..n {
            quad += map[(i, j)] * map[(i, j)] / p_lo[j];
        }
        (terminal.level * quad).sqrt()
    })
}

/// Run the lane-keeping closed loop end to end.
pub fn lane_keeping_scenario(
    cfg: &LaneKeepingConfig,
) -> Result<(ExperimentLog, ScenarioSummary, ScenarioArtifacts), VehicleError> {
    let prepared = prepare_scenario(cfg)?;
    let sys = &prepared.sys;

    let synth_predictor = Predictor::enhanced(sys, sys.theta_set())?;

    // Seeded noise and disturbance realizations, piecewise-constant on the
    // measurement grid so envelope membership is exact at the nodes.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let nu_realization = sample_piecewise(
        &prepared.bounds.nu,
        cfg.duration + cfg.ocp.horizon,
        cfg.meas_step,
        &mut rng,
    );
    let process_real = sample_piecewise(
        &Envelope::symmetric(cfg.process_noise_mag.clone()),
        cfg.duration + cfg.ocp.horizon,
        cfg.meas_step,
        &mut rng,
    );

    let reference = cfg.reference;
    let pre_gain = prepared.pre_gain.clone();
    let nu_for_dist = nu_realization.clone();
    let true_disturbance = move |t: f64| {
        let mut w = process_real.eval(t).clone();
        w[0] -= reference.slope(t);
        let nu1 = nu_for_dist.eval(t).rows(0, 4).into_owned();
        let leak = (&pre_gain * nu1)[(0, 0)];
        let mut out = DVector::zeros(5);
        out.rows_mut(0, 4).copy_from(&w);
        out[4] = leak;
        out
    };
    let noise = move |t: f64| nu_realization.eval(t).clone();

    let inputs = RunInputs {
        sys,
        true_theta: cfg.params.true_friction.clone(),
        x0: cfg.x0.clone(),
        bounds: &prepared.bounds,
        constraints: &prepared.constraints,
        spec: &cfg.ocp,
        estimation: cfg.estimation.clone(),
        artifacts: &prepared.artifacts,
        synth_predictor: &synth_predictor,
        terminal: prepared.terminal,
        control_rule: ControlConstraint::WithStateFeedback {
            gain: prepared.pre_gain.clone(),
            nu1_mag: cfg.nu1_mag.clone(),
        },
        predictor_mode: PredictorMode::Auto,
        duration: cfg.duration,
        sim_step: cfg.sim_step,
        meas_step: cfg.meas_step,
        log_every: cfg.log_every,
        true_disturbance: &true_disturbance,
        noise: &noise,
    };
    let log = run_receding_horizon(&inputs)?;

    let mut max_abs = DVector::<f64>::zeros(4);
    for row in &log.rows {
        for i in 0..4 {
            max_abs[i] = max_abs[i].max(row.x[i].abs());
        }
    }
    let forms: Vec<&'static str> = log.replans.iter().map(|r| r.predictor_form).collect();
    let predictor_form = if forms.iter().all(|f| *f == "enhanced") {
        "enhanced"
    } else {
        "naive-fallback"
    };
    let summary = ScenarioSummary {
        time_entered_terminal: log.time_entered_terminal,
        branch_switches: log.branch_switches,
        state_violations: log.violations.state,
        control_violations: log.violations.control,
        inclusion_violations: log.violations.inclusion,
        max_abs_state: max_abs,
        final_region_lo: log.replans.last().map_or_else(
            || prepared.sys.theta_set().lo().clone(),
            |r| r.region_lo.clone(),
        ),
        final_region_hi: log.replans.last().map_or_else(
            || prepared.sys.theta_set().hi().clone(),
            |r| r.region_hi.clone(),
        ),
        level: prepared.terminal.level,
        predictor_form,
    };
    Ok((log, summary, prepared))
}

/// Piecewise-constant realization drawn uniformly inside an envelope, with a
/// fixed dwell between switches.
pub fn sample_piecewise(
    env: &Envelope,
    t_end: f64,
    dwell: f64,
    rng: &mut ChaCha8Rng,
) -> PiecewiseConstant {
    let n = (t_end / dwell).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dwell;
        times.push(t);
        values.push(env.sample(t, rng));
    }
    PiecewiseConstant::new(times, values).expect("dwell grid is increasing")
}
