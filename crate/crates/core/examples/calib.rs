// Scratch calibration runner (not part of the deliverable surface; removed later).
use ampc_core::model::ParametricLinearSystem;
use ampc_core::prediction::Predictor;
use ampc_core::sets::IntervalBox;
use ampc_core::signal::Envelope;
use ampc_core::stabilization::*;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

fn main() {
    let sys = ParametricLinearSystem::new(
        dmatrix![0.0], vec![dmatrix![-1.0]], dmatrix![1.0], dmatrix![1.0],
        IntervalBox::scalar(1.0, 2.0).unwrap(),
    ).unwrap();
    let predictor = Predictor::enhanced(&sys, sys.theta_set()).unwrap();
    let omega = Envelope::symmetric(dvector![0.05]);
    let nu1 = dvector![0.05];
    let cfg = SynthesisConfig { budget: 30_000, restarts: 2, seed: 7, ..Default::default() };
    let (artifacts, terminal) = prepare_terminal_artifacts(&predictor, &omega, &nu1, &cfg).unwrap();
    println!("S = {:?}", artifacts.gains.s.row(0).iter().copied().collect::<Vec<f64>>());
    let delta_box = predictor.ext.delta_box(&omega);
    println!("delta_box radii = {:?}", delta_box.radii().iter().copied().collect::<Vec<f64>>());
    let rep = check_terminal_constraints(
        &artifacts.cert, &artifacts.gains, &terminal, &predictor.transform,
        &IntervalBox::scalar(-3.0, 3.0).unwrap(),
        &IntervalBox::scalar(-10.0, 10.0).unwrap(),
        &delta_box, None, 1000, 1,
    );
    println!("margins: state={:?} control={:?}", rep.state_margin, rep.control_margin);
    let s_center: DVector<f64> = &artifacts.gains.s * delta_box.center();
    let s_radius: DVector<f64> = artifacts.gains.s.map(f64::abs) * delta_box.radii();
    println!("s_center={:?} s_radius={:?}", s_center[0], s_radius[0]);
    let _ = DMatrix::<f64>::zeros(1,1);
}
