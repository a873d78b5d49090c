//! Experiment configuration: a nested TOML document with explicit sections.
//!
//! Parsing is total — unknown fields and missing required fields are errors
//! with a line/field diagnostic. Matrices are row-major number lists.

use ampc_core::model::{ConstraintBoxes, ParametricLinearSystem, SignalBounds};
use ampc_core::mpc::{EstimationOptions, OcpSpec, PredictorMode, StateBoundMode};
use ampc_core::sets::IntervalBox;
use ampc_core::signal::Envelope;
use ampc_core::stabilization::SynthesisConfig;
use ampc_core::vehicle::{BicycleParams, LaneKeepingConfig, LaneReference};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random draw in a command derives from it.
    pub seed: u64,
    pub plant: Option<PlantSection>,
    pub bounds: Option<BoundsSection>,
    pub constraints: Option<ConstraintsSection>,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub stabilization: StabilizationSection,
    #[serde(default)]
    pub mpc: MpcSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub state_dim: usize,
    pub control_dim: usize,
    pub disturbance_dim: usize,
    pub param_dim: usize,
    pub a_nominal: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub theta_lo: Vec<f64>,
    pub theta_hi: Vec<f64>,
    pub true_theta: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub omega_mag: Vec<f64>,
    pub nu1_mag: Vec<f64>,
    pub nu2_mag: Vec<f64>,
    pub x0_lo: Vec<f64>,
    pub x0_hi: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub state_mag: Vec<f64>,
    pub control_mag: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    /// Excitation window length ℓ in seconds.
    pub window: f64,
    /// Perturbation norm bound; derived from the envelopes when absent.
    pub eta_bar: Option<f64>,
    pub x_inf_bound: f64,
    /// "configured" or "observed".
    pub state_bound_mode: String,
    pub pe_stride: f64,
    pub vartheta_override: Option<f64>,
    /// Open-loop excitation (square wave) for the estimate command.
    pub excitation_amplitude: f64,
    pub excitation_period: f64,
    /// Confidence-region refresh cadence of the estimate command.
    pub update_every: f64,
    pub measurement_step: f64,
    pub duration: f64,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            window: 1.0,
            eta_bar: None,
            x_inf_bound: 2.5,
            state_bound_mode: "configured".into(),
            pe_stride: 0.25,
            vartheta_override: None,
            excitation_amplitude: 0.0,
            excitation_period: 2.0,
            update_every: 0.5,
            measurement_step: 0.01,
            duration: 10.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    /// "auto", "naive" or "enhanced".
    pub mode: String,
    pub step: f64,
    pub horizon: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            mode: "auto".into(),
            step: 1e-3,
            horizon: 10.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizationSection {
    pub budget: usize,
    pub restarts: usize,
    pub margin: f64,
    /// Load gains and certificate from this document instead of synthesizing.
    pub certificate_path: Option<String>,
}

impl Default for StabilizationSection {
    fn default() -> Self {
        Self {
            budget: 40_000,
            restarts: 4,
            margin: 1e-6,
            certificate_path: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub horizon: f64,
    pub apply_time: f64,
    pub segments: usize,
    pub candidates: usize,
    pub grid_per_segment: usize,
    /// Scalar multiples of the identity.
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 3.0,
            apply_time: 0.5,
            segments: 6,
            candidates: 1000,
            grid_per_segment: 30,
            w1: 10.0,
            w2: 1.0,
            w3: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// "generic" or "lane_keeping".
    pub kind: String,
    pub duration: f64,
    #[serde(default = "default_sim_step")]
    pub sim_step: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub vehicle: Option<VehicleSection>,
}

fn default_sim_step() -> f64 {
    1e-3
}

fn default_log_every() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSection {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub dist_front: f64,
    pub dist_rear: f64,
    pub speed: f64,
    pub friction_lo: Vec<f64>,
    pub friction_hi: Vec<f64>,
    pub true_friction: Vec<f64>,
    pub pre_poles: Vec<f64>,
    pub lane_amplitude: f64,
    pub lane_steepness: f64,
    pub lane_center_time: f64,
    pub process_noise_mag: Vec<f64>,
    pub x0: Vec<f64>,
    pub x0_slack: Vec<f64>,
    #[serde(default = "default_terminal_safety")]
    pub terminal_safety: f64,
}

fn default_terminal_safety() -> f64 {
    0.8
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<String>,
    pub plot: bool,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self.scenario.kind.as_str() {
            "generic" => {
                if self.plant.is_none() || self.bounds.is_none() || self.constraints.is_none() {
                    return Err(ConfigError::Invalid(
                        "generic scenarios need [plant], [bounds] and [constraints]".into(),
                    ));
                }
            }
            "lane_keeping" => {
                if self.scenario.vehicle.is_none() || self.bounds.is_none() {
                    return Err(ConfigError::Invalid(
                        "lane_keeping scenarios need [scenario.vehicle] and [bounds]".into(),
                    ));
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown scenario kind '{other}'"
                )))
            }
        }
        match self.predictor.mode.as_str() {
            "auto" | "naive" | "enhanced" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown predictor mode '{other}'"
                )))
            }
        }
        match self.estimation.state_bound_mode.as_str() {
            "configured" | "observed" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown state_bound_mode '{other}'"
                )))
            }
        }
        Ok(())
    }

    pub fn build_plant(&self) -> Result<ParametricLinearSystem, ConfigError> {
        let p = self.plant.as_ref().ok_or_else(|| {
            ConfigError::Invalid("this command needs a [plant] section".into())
        })?;
        let invalid = |m: String| ConfigError::Invalid(m);
        let expect = |name: &str, v: &[f64], len: usize| {
            if v.len() == len {
                Ok(())
            } else {
                Err(invalid(format!(
                    "plant.{name} needs {len} numbers, got {}",
                    v.len()
                )))
            }
        };
        let (n, q, r, d) = (p.state_dim, p.control_dim, p.disturbance_dim, p.param_dim);
        expect("a_nominal", &p.a_nominal, n * n)?;
        expect("b", &p.b, n * q)?;
        expect("d", &p.d, n * r)?;
        expect("theta_lo", &p.theta_lo, d)?;
        expect("theta_hi", &p.theta_hi, d)?;
        expect("true_theta", &p.true_theta, d)?;
        expect("x0", &p.x0, n)?;
        if p.basis.len() != d {
            return Err(invalid(format!(
                "plant.basis needs {d} matrices, got {}",
                p.basis.len()
            )));
        }
        let mut basis = Vec::with_capacity(d);
        for (i, phi) in p.basis.iter().enumerate() {
            expect(&format!("basis[{i}]"), phi, n * n)?;
            basis.push(DMatrix::from_row_slice(n, n, phi));
        }
        let theta_set = IntervalBox::new(
            DVector::from_row_slice(&p.theta_lo),
            DVector::from_row_slice(&p.theta_hi),
        )
        .map_err(|e| invalid(e.to_string()))?;
        ParametricLinearSystem::new(
            DMatrix::from_row_slice(n, n, &p.a_nominal),
            basis,
            DMatrix::from_row_slice(n, q, &p.b),
            DMatrix::from_row_slice(n, r, &p.d),
            theta_set,
        )
        .map_err(|e| invalid(e.to_string()))
    }

    pub fn build_bounds(&self, sys: &ParametricLinearSystem) -> Result<SignalBounds, ConfigError> {
        let b = self
            .bounds
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [bounds] section".into()))?;
        let p = sys.state_dim();
        if b.omega_mag.len() != sys.disturbance_dim()
            || b.nu1_mag.len() != p
            || b.nu2_mag.len() != p
            || b.x0_lo.len() != p
            || b.x0_hi.len() != p
        {
            return Err(ConfigError::Invalid(
                "[bounds] vector lengths do not match the plant dimensions".into(),
            ));
        }
        let nu_mag =
            DVector::from_iterator(2 * p, b.nu1_mag.iter().chain(b.nu2_mag.iter()).copied());
        let bounds = SignalBounds {
            omega: Envelope::symmetric(DVector::from_row_slice(&b.omega_mag)),
            nu: Envelope::symmetric(nu_mag),
            x0_lo: DVector::from_row_slice(&b.x0_lo),
            x0_hi: DVector::from_row_slice(&b.x0_hi),
        };
        bounds
            .validate(sys)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(bounds)
    }

    pub fn build_constraints(
        &self,
        sys: &ParametricLinearSystem,
    ) -> Result<ConstraintBoxes, ConfigError> {
        let c = self
            .constraints
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [constraints] section".into()))?;
        if c.state_mag.len() != sys.state_dim() || c.control_mag.len() != sys.control_dim() {
            return Err(ConfigError::Invalid(
                "[constraints] vector lengths do not match the plant dimensions".into(),
            ));
        }
        Ok(ConstraintBoxes {
            state: IntervalBox::symmetric(&DVector::from_row_slice(&c.state_mag))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            control: IntervalBox::symmetric(&DVector::from_row_slice(&c.control_mag))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        })
    }

    pub fn estimation_options(&self) -> Result<EstimationOptions, ConfigError> {
        let e = &self.estimation;
        Ok(EstimationOptions {
            window: e.window,
            eta_bar: e.eta_bar,
            x_inf_bound: e.x_inf_bound,
            state_bound_mode: match e.state_bound_mode.as_str() {
                "observed" => StateBoundMode::Observed,
                _ => StateBoundMode::Configured,
            },
            pe_stride: e.pe_stride,
            vartheta_override: e.vartheta_override,
        })
    }

    pub fn predictor_mode(&self) -> PredictorMode {
        match self.predictor.mode.as_str() {
            "naive" => PredictorMode::Naive,
            "enhanced" => PredictorMode::Enhanced,
            _ => PredictorMode::Auto,
        }
    }

    pub fn ocp_spec(&self, state_dim: usize, control_dim: usize, seed: u64) -> OcpSpec {
        let m = &self.mpc;
        OcpSpec {
            horizon: m.horizon,
            apply_time: m.apply_time,
            w1: DMatrix::identity(2 * state_dim, 2 * state_dim) * m.w1,
            w2: DMatrix::identity(2 * state_dim, 2 * state_dim) * m.w2,
            w3: DMatrix::identity(control_dim, control_dim) * m.w3,
            segments: m.segments,
            candidates: m.candidates,
            grid_per_segment: m.grid_per_segment,
            seed,
        }
    }

    pub fn synthesis_config(&self, seed: u64) -> SynthesisConfig {
        SynthesisConfig {
            budget: self.stabilization.budget,
            restarts: self.stabilization.restarts,
            margin: self.stabilization.margin,
            seed,
            ..Default::default()
        }
    }

    pub fn lane_keeping(&self, seed: u64) -> Result<LaneKeepingConfig, ConfigError> {
        let v = self
            .scenario
            .vehicle
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [scenario.vehicle] section".into()))?;
        let b = self
            .bounds
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [bounds] section".into()))?;
        let c = self
            .constraints
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [constraints] section".into()))?;
        let invalid = |m: String| ConfigError::Invalid(m);
        let vec4 = |name: &str, xs: &[f64]| {
            if xs.len() == 4 {
                Ok(DVector::from_row_slice(xs))
            } else {
                Err(invalid(format!("{name} needs 4 numbers")))
            }
        };
        let vec2 = |name: &str, xs: &[f64]| {
            if xs.len() == 2 {
                Ok(DVector::from_row_slice(xs))
            } else {
                Err(invalid(format!("{name} needs 2 numbers")))
            }
        };
        if c.control_mag.len() != 1 {
            return Err(invalid("lane keeping uses a single control bound".into()));
        }
        let friction_box = IntervalBox::new(
            vec2("vehicle.friction_lo", &v.friction_lo)?,
            vec2("vehicle.friction_hi", &v.friction_hi)?,
        )
        .map_err(|e| invalid(e.to_string()))?;
        Ok(LaneKeepingConfig {
            params: BicycleParams {
                mass: v.mass,
                yaw_inertia: v.yaw_inertia,
                dist_front: v.dist_front,
                dist_rear: v.dist_rear,
                speed: v.speed,
                true_friction: vec2("vehicle.true_friction", &v.true_friction)?,
                friction_box,
            },
            reference: LaneReference {
                amplitude: v.lane_amplitude,
                steepness: v.lane_steepness,
                center_time: v.lane_center_time,
            },
            state_bound: vec4("constraints.state_mag", &c.state_mag)?,
            control_bound: c.control_mag[0],
            pre_poles: v.pre_poles.clone(),
            nu1_mag: vec4("bounds.nu1_mag", &b.nu1_mag)?,
            nu2_mag: vec4("bounds.nu2_mag", &b.nu2_mag)?,
            process_noise_mag: vec4("vehicle.process_noise_mag", &v.process_noise_mag)?,
            x0: vec4("vehicle.x0", &v.x0)?,
            x0_slack: vec4("vehicle.x0_slack", &v.x0_slack)?,
            ocp: self.ocp_spec(4, 1, seed),
            estimation: self.estimation_options()?,
            synthesis: self.synthesis_config(seed),
            artifacts: None,
            terminal_safety: v.terminal_safety,
            duration: self.scenario.duration,
            sim_step: self.scenario.sim_step,
            meas_step: self.estimation.measurement_step,
            log_every: self.scenario.log_every,
            noise_seed: seed ^ 0x5EED_0000,
        })
    }
}
