//! The four experiment drivers behind the command-line front end.
//!
//! Every command is a pure function of (config, seed): all randomness flows
//! from seeded generators, and outputs are written with round-trip float
//! formatting, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ampc_core::model::{attach_measurements, simulate_plant, ParametricLinearSystem, SignalBounds};
use ampc_core::mpc::{
    run_receding_horizon, ControlConstraint, ExperimentLog, MpcError, OnlineEstimator,
    PredictorMode, RunInputs,
};
use ampc_core::prediction::Predictor;
use ampc_core::signal::PiecewiseConstant;
use ampc_core::stabilization::{
    build_upsilon, check_terminal_constraints, delta_tilde_box, prepare_terminal_artifacts,
    terminal_set, verify_certificate, CertificateVerdict, StabilizationArtifacts, TerminalSet,
};
use ampc_core::vehicle::{lane_keeping_scenario, prepare_scenario};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::plot::{render_funnels, FunnelSeries};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("persistence of excitation failed: {0}")]
    PeFailure(String),
    #[error("estimator flagged inconsistent measurements (check the η̄ budget)")]
    Inconsistent,
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("controller fault: {0}")]
    ControllerFault(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 1,
            CommandError::PeFailure(_) => 2,
            CommandError::Inconsistent => 3,
            CommandError::Synthesis(_) => 4,
            CommandError::ControllerFault(_) => 5,
            CommandError::Io { .. } | CommandError::Other(_) => 1,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CommandError> {
    std::fs::write(path, contents).map_err(|source| CommandError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn fmt_row(fields: &[f64]) -> String {
    fields
        .iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn cols(name: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{name}{i}")).collect()
}

/// Seeded piecewise-constant realization inside an envelope, switching every
/// `dwell` seconds.
fn realization(
    env: &ampc_core::signal::Envelope,
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

pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Open-loop excitation run feeding the estimator; emits the confidence-box
/// history as CSV.
pub fn cmd_estimate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<CommandOutput, CommandError> {
    let sys = cfg.build_plant()?;
    let bounds = cfg.build_bounds(&sys)?;
    let est = &cfg.estimation;
    let plant = cfg.plant.as_ref().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega_real = realization(&bounds.omega, est.duration, est.measurement_step, &mut rng);
    let nu_real = realization(&bounds.nu, est.duration, est.measurement_step, &mut rng);

    let amplitude = est.excitation_amplitude;
    let period = est.excitation_period;
    let q = sys.control_dim();
    let control = move |t: f64| {
        let phase = (t / period).fract();
        let sign = if phase < 0.5 { 1.0 } else { -1.0 };
        DVector::from_element(q, amplitude * sign)
    };

    let theta = DVector::from_row_slice(&plant.true_theta);
    let x0 = DVector::from_row_slice(&plant.x0);
    let mut trace = simulate_plant(
        &sys,
        &theta,
        |t| omega_real.eval(t).clone(),
        control,
        &x0,
        est.duration,
        cfg.scenario.sim_step,
    )
    .map_err(|e| CommandError::Other(e.to_string()))?;
    attach_measurements(&mut trace, &sys, &theta, |t| nu_real.eval(t).clone());

    let mut estimator = OnlineEstimator::new(&sys, &bounds, cfg.estimation_options()?)
        .map_err(|e| CommandError::Other(e.to_string()))?;
    let steps_per_meas = (est.measurement_step / cfg.scenario.sim_step).round().max(1.0) as usize;
    let steps_per_update = (est.update_every / cfg.scenario.sim_step).round().max(1.0) as usize;

    let d = sys.param_dim();
    let mut header = vec!["t".to_string()];
    header.extend(cols("theta_hat", d));
    header.extend(cols("box_lo", d));
    header.extend(cols("box_hi", d));
    let mut csv = header.join(",") + "\n";
    let mut witnessed = false;
    for k in 0..trace.len() {
        if k % steps_per_meas == 0 {
            estimator.record(
                &sys,
                trace.times[k],
                &trace.y1[k],
                &trace.y2[k],
                &trace.controls[k],
            );
        }
        if k > 0 && k % steps_per_update == 0 {
            let (witness, _) = estimator.refresh(&sys, trace.times[k]);
            witnessed |= witness.is_some();
            let region = estimator.region();
            let mut fields = vec![trace.times[k]];
            fields.extend(region.theta_hat().iter().copied());
            fields.extend(region.current().lo().iter().copied());
            fields.extend(region.current().hi().iter().copied());
            csv.push_str(&fmt_row(&fields));
            csv.push('\n');
        }
    }
    if estimator.region().inconsistent() {
        return Err(CommandError::Inconsistent);
    }
    if !witnessed {
        return Err(CommandError::PeFailure(
            "no excitation witness could be established over the whole run".into(),
        ));
    }
    let path = out_dir.join("estimate.csv");
    write_file(&path, &csv)?;
    let region = estimator.region();
    let summary = format!(
        "eta_bar {:?}\nfinal_box_lo {}\nfinal_box_hi {}\n",
        estimator.eta_bar(),
        fmt_row(&region.current().lo().iter().copied().collect::<Vec<_>>()),
        fmt_row(&region.current().hi().iter().copied().collect::<Vec<_>>()),
    );
    Ok(CommandOutput {
        files: vec![path],
        summary,
    })
}

/// Roll the interval predictors against the true trajectory; emits one CSV
/// per predictor and optional funnel plots.
pub fn cmd_predict(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
    plot: bool,
) -> Result<CommandOutput, CommandError> {
    let sys = cfg.build_plant()?;
    let bounds = cfg.build_bounds(&sys)?;
    let plant = cfg.plant.as_ref().expect("validated");
    let p = sys.state_dim();
    let step = cfg.predictor.step;
    let horizon = cfg.predictor.horizon;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega_real = realization(&bounds.omega, horizon, cfg.estimation.measurement_step, &mut rng);

    let theta = DVector::from_row_slice(&plant.true_theta);
    let x0 = DVector::from_row_slice(&plant.x0);
    let q = sys.control_dim();
    let trace = simulate_plant(
        &sys,
        &theta,
        |t| omega_real.eval(t).clone(),
        move |_| DVector::zeros(q),
        &x0,
        horizon,
        step,
    )
    .map_err(|e| CommandError::Other(e.to_string()))?;

    let requested: Vec<&str> = match cfg.predictor.mode.as_str() {
        "naive" => vec!["naive"],
        "enhanced" => vec!["enhanced"],
        _ => vec!["naive", "enhanced"],
    };
    let mut files = Vec::new();
    let mut summary = String::new();
    for which in requested {
        let predictor = match which {
            "naive" => Predictor::naive(&sys, sys.theta_set()),
            _ => match Predictor::enhanced(&sys, sys.theta_set()) {
                Ok(pr) => pr,
                Err(e) => {
                    let _ = writeln!(summary, "enhanced predictor unavailable: {e}");
                    continue;
                }
            },
        };
        // Open-loop prediction anchors on the initial-state box.
        let mut state = predictor.anchor_box(&bounds.x0_lo, &bounds.x0_hi, 0.0);
        let mut times = vec![0.0];
        let mut lo_rows = vec![predictor.to_physical(&state).lo.clone()];
        let mut hi_rows = vec![predictor.to_physical(&state).hi.clone()];
        let mut truncated = None;
        for k in 0..trace.len() - 1 {
            let t = trace.times[k];
            match predictor.step(
                &state,
                &DVector::zeros(q),
                bounds.omega.lo_at(t),
                bounds.omega.hi_at(t),
                step,
            ) {
                Ok(next) => state = next,
                Err(e) => {
                    truncated = Some((t, e.to_string()));
                    break;
                }
            }
            let phys = predictor.to_physical(&state);
            times.push(trace.times[k + 1]);
            lo_rows.push(phys.lo);
            hi_rows.push(phys.hi);
        }

        let mut header = vec!["t".to_string()];
        header.extend(cols("x_lo", p));
        header.extend(cols("x_hi", p));
        header.extend(cols("x_true", p));
        let mut csv = header.join(",") + "\n";
        for (k, &t) in times.iter().enumerate() {
            let mut fields = vec![t];
            fields.extend(lo_rows[k].iter().copied());
            fields.extend(hi_rows[k].iter().copied());
            fields.extend(trace.states[k].iter().copied());
            csv.push_str(&fmt_row(&fields));
            csv.push('\n');
        }
        let path = out_dir.join(format!("predict_{which}.csv"));
        write_file(&path, &csv)?;
        files.push(path);
        match truncated {
            Some((t, reason)) => {
                let _ = writeln!(
                    summary,
                    "{which}: truncated at t={t:.3} ({reason}); divergence of the naive predictor is an expected demonstration"
                );
            }
            None => {
                let width: f64 = (0..p)
                    .map(|i| hi_rows.last().unwrap()[i] - lo_rows.last().unwrap()[i])
                    .fold(0.0, f64::max);
                let _ = writeln!(summary, "{which}: completed, final max width {width:.6}");
            }
        }
        if plot {
            let series = FunnelSeries {
                label: which,
                times: &times,
                lo: (0..p)
                    .map(|i| lo_rows.iter().map(|r| r[i]).collect())
                    .collect(),
                hi: (0..p)
                    .map(|i| hi_rows.iter().map(|r| r[i]).collect())
                    .collect(),
                truth: Some(
                    (0..p)
                        .map(|i| trace.states[..times.len()].iter().map(|x| x[i]).collect())
                        .collect(),
                ),
            };
            let path = out_dir.join(format!("predict_{which}.svg"));
            write_file(&path, &render_funnels(&series))?;
            files.push(path);
        }
    }
    Ok(CommandOutput { files, summary })
}

fn synthesize_generic(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<
    (
        ParametricLinearSystem,
        SignalBounds,
        Predictor,
        StabilizationArtifacts,
        TerminalSet,
    ),
    CommandError,
> {
    let sys = cfg.build_plant()?;
    let bounds = cfg.build_bounds(&sys)?;
    let predictor = match cfg.predictor_mode() {
        PredictorMode::Naive => Predictor::naive(&sys, sys.theta_set()),
        PredictorMode::Enhanced => Predictor::enhanced(&sys, sys.theta_set())
            .map_err(|e| CommandError::Synthesis(e.to_string()))?,
        PredictorMode::Auto => Predictor::auto(&sys, sys.theta_set()),
    };
    let nu1_mag = bounds.nu1_magnitude(sys.state_dim());
    let (artifacts, terminal) = match &cfg.stabilization.certificate_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CommandError::Io {
                path: path.clone(),
                source,
            })?;
            let mut artifacts = StabilizationArtifacts::from_document(&text)
                .map_err(|e| CommandError::Synthesis(e.to_string()))?;
            match verify_certificate(&predictor.ext, &artifacts.gains, &artifacts.cert) {
                CertificateVerdict::Valid { alpha, .. } => artifacts.cert.alpha = alpha,
                CertificateVerdict::Invalid(issues) => {
                    return Err(CommandError::Synthesis(format!(
                        "stored certificate is invalid for this plant: {issues:?}"
                    )))
                }
            }
            let delta_box = predictor.ext.delta_box(&bounds.omega);
            let dt = delta_tilde_box(&predictor.ext, &artifacts.gains.s, &delta_box);
            let terminal = terminal_set(&artifacts.cert, &dt);
            (artifacts, terminal)
        }
        None => prepare_terminal_artifacts(
            &predictor,
            &bounds.omega,
            &nu1_mag,
            &cfg.synthesis_config(seed),
        )
        .map_err(|e| CommandError::Synthesis(e.to_string()))?,
    };
    Ok((sys, bounds, predictor, artifacts, terminal))
}

/// Synthesize (or load) a certificate and write it plus a human-readable
/// report.
pub fn cmd_synthesize(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<CommandOutput, CommandError> {
    let mut report = String::new();
    let (artifacts, verdict_line, terminal) = if cfg.scenario.kind == "lane_keeping" {
        let lk = cfg.lane_keeping(seed)?;
        let prep = prepare_scenario(&lk).map_err(|e| CommandError::Synthesis(e.to_string()))?;
        let _ = writeln!(report, "scenario lane_keeping");
        let _ = writeln!(report, "predictor {}", prep.predictor_form);
        let _ = writeln!(
            report,
            "terminal_constraints conclusive={} sampled={} state_margin={:?} control_margin={:?}",
            prep.constraint_report.conclusive,
            prep.constraint_report.sampled_ok,
            prep.constraint_report.state_margin,
            prep.constraint_report.control_margin
        );
        let sys = prep.sys.clone();
        let pred = Predictor::enhanced(&sys, sys.theta_set())
            .map_err(|e| CommandError::Synthesis(e.to_string()))?;
        let lam = ampc_core::linalg::lambda_max_symmetric(&build_upsilon(
            &pred.ext,
            &prep.artifacts.gains,
            &prep.artifacts.cert,
        ));
        (
            prep.artifacts.clone(),
            format!("lambda_max_upsilon {lam:?}"),
            prep.terminal,
        )
    } else {
        let (_sys, bounds, predictor, artifacts, terminal) = synthesize_generic(cfg, seed)?;
        let constraints = cfg.build_constraints(&_sys)?;
        let delta_box = predictor.ext.delta_box(&bounds.omega);
        let rep = check_terminal_constraints(
            &artifacts.cert,
            &artifacts.gains,
            &terminal,
            &predictor.transform,
            &constraints.state,
            &constraints.control,
            &delta_box,
            None,
            10_000,
            seed ^ 0xA55A,
        );
        let _ = writeln!(report, "scenario generic");
        let _ = writeln!(report, "predictor {}", predictor.form.name());
        let _ = writeln!(
            report,
            "terminal_constraints conclusive={} sampled={} state_margin={:?} control_margin={:?}",
            rep.conclusive, rep.sampled_ok, rep.state_margin, rep.control_margin
        );
        let lam = ampc_core::linalg::lambda_max_symmetric(&build_upsilon(
            &predictor.ext,
            &artifacts.gains,
            &artifacts.cert,
        ));
        (artifacts, format!("lambda_max_upsilon {lam:?}"), terminal)
    };
    let _ = writeln!(report, "{verdict_line}");
    let _ = writeln!(report, "alpha {:?}", artifacts.cert.alpha);
    let _ = writeln!(report, "terminal_level {:?}", terminal.level);

    let cert_path = out_dir.join("certificate.txt");
    write_file(&cert_path, &artifacts.to_document())?;
    let report_path = out_dir.join("synthesis_report.txt");
    write_file(&report_path, &report)?;
    Ok(CommandOutput {
        files: vec![cert_path, report_path],
        summary: report,
    })
}

fn log_to_csv(log: &ExperimentLog) -> String {
    let mut out = Vec::new();
    log.write_csv(&mut out).expect("in-memory write");
    String::from_utf8(out).expect("csv is utf-8")
}

fn run_summary(log: &ExperimentLog) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "time_entered_terminal {}",
        log.time_entered_terminal
            .map_or("never".into(), |t| format!("{t:?}"))
    );
    let _ = writeln!(s, "branch_switches {}", log.branch_switches);
    let _ = writeln!(s, "state_violations {}", log.violations.state);
    let _ = writeln!(s, "control_violations {}", log.violations.control);
    let _ = writeln!(s, "inclusion_violations {}", log.violations.inclusion);
    let _ = writeln!(s, "terminal_level {:?}", log.level);
    let _ = writeln!(s, "replans {}", log.replans.len());
    let _ = writeln!(s, "estimator_inconsistent {}", log.estimator_inconsistent);
    if let Some(last) = log.replans.last() {
        let _ = writeln!(
            s,
            "final_theta_box_lo {}",
            fmt_row(&last.region_lo.iter().copied().collect::<Vec<_>>())
        );
        let _ = writeln!(
            s,
            "final_theta_box_hi {}",
            fmt_row(&last.region_hi.iter().copied().collect::<Vec<_>>())
        );
    }
    for w in &log.warnings {
        let _ = writeln!(s, "warning {w}");
    }
    s
}

fn plot_run(log: &ExperimentLog, out_dir: &Path, files: &mut Vec<PathBuf>) -> Result<(), CommandError> {
    if log.rows.is_empty() {
        return Ok(());
    }
    let p = log.rows[0].x.len();
    let times: Vec<f64> = log.rows.iter().map(|r| r.t).collect();
    let series = FunnelSeries {
        label: "state",
        times: &times,
        lo: (0..p)
            .map(|i| log.rows.iter().map(|r| r.x_lo[i]).collect())
            .collect(),
        hi: (0..p)
            .map(|i| log.rows.iter().map(|r| r.x_hi[i]).collect())
            .collect(),
        truth: Some(
            (0..p)
                .map(|i| log.rows.iter().map(|r| r.x[i]).collect())
                .collect(),
        ),
    };
    let path = out_dir.join("run.svg");
    write_file(&path, &render_funnels(&series))?;
    files.push(path);
    Ok(())
}

/// Full closed-loop experiment; emits the run CSV, a summary and optional
/// plots.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
    plot: bool,
) -> Result<CommandOutput, CommandError> {
    let mut files = Vec::new();
    let (log, summary) = if cfg.scenario.kind == "lane_keeping" {
        let mut lk = cfg.lane_keeping(seed)?;
        if let Some(path) = &cfg.stabilization.certificate_path {
            let text = std::fs::read_to_string(path).map_err(|source| CommandError::Io {
                path: path.clone(),
                source,
            })?;
            lk.artifacts = Some(
                StabilizationArtifacts::from_document(&text)
                    .map_err(|e| CommandError::Synthesis(e.to_string()))?,
            );
        }
        let (log, summary, _prep) = lane_keeping_scenario(&lk).map_err(|e| match e {
            ampc_core::vehicle::VehicleError::Mpc(MpcError::ControllerFault { t, margin }) => {
                CommandError::ControllerFault(format!(
                    "no feasible plan at t={t} (margin {margin:.3e})"
                ))
            }
            ampc_core::vehicle::VehicleError::Stabilization(e) => {
                CommandError::Synthesis(e.to_string())
            }
            other => CommandError::Other(other.to_string()),
        })?;
        (log, summary.to_text())
    } else {
        let (sys, bounds, predictor, artifacts, terminal) = synthesize_generic(cfg, seed)?;
        let constraints = cfg.build_constraints(&sys)?;
        let plant = cfg.plant.as_ref().expect("validated");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000);
        let horizon = cfg.scenario.duration + cfg.mpc.horizon;
        let omega_real = realization(
            &bounds.omega,
            horizon,
            cfg.estimation.measurement_step,
            &mut rng,
        );
        let nu_real = realization(&bounds.nu, horizon, cfg.estimation.measurement_step, &mut rng);
        let dist = |t: f64| omega_real.eval(t).clone();
        let noise = |t: f64| nu_real.eval(t).clone();
        let inputs = RunInputs {
            sys: &sys,
            true_theta: DVector::from_row_slice(&plant.true_theta),
            x0: DVector::from_row_slice(&plant.x0),
            bounds: &bounds,
            constraints: &constraints,
            spec: &cfg.ocp_spec(sys.state_dim(), sys.control_dim(), seed),
            estimation: cfg.estimation_options()?,
            artifacts: &artifacts,
            synth_predictor: &predictor,
            terminal,
            control_rule: ControlConstraint::Direct,
            predictor_mode: cfg.predictor_mode(),
            duration: cfg.scenario.duration,
            sim_step: cfg.scenario.sim_step,
            meas_step: cfg.estimation.measurement_step,
            log_every: cfg.scenario.log_every,
            true_disturbance: &dist,
            noise: &noise,
        };
        let log = run_receding_horizon(&inputs).map_err(|e| match e {
            MpcError::ControllerFault { t, margin } => CommandError::ControllerFault(format!(
                "no feasible plan at t={t} (margin {margin:.3e})"
            )),
            other => CommandError::Other(other.to_string()),
        })?;
        let summary = run_summary(&log);
        (log, summary)
    };

    let csv_path = out_dir.join("run.csv");
    write_file(&csv_path, &log_to_csv(&log))?;
    files.push(csv_path);
    let summary_path = out_dir.join("summary.txt");
    write_file(&summary_path, &summary)?;
    files.push(summary_path);
    if plot {
        plot_run(&log, out_dir, &mut files)?;
    }
    Ok(CommandOutput { files, summary })
}
