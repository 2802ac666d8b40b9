//! Library-level pipeline: config -> data -> network -> context -> closed loop.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use neural_deepc::controllers::{Formulation, NeuralDeepc};
use neural_deepc::experiment::{build_context, generate_data, hankel_from_data, train_network, ExperimentConfig};
use neural_deepc::harness::{compute_metrics, run_closed_loop, ClosedLoopLog, ClosedLoopOptions, InputReference};
use neural_deepc::plant::{Pendulum, PlantState};
use neural_deepc::predictors::DeepcContext;
use neural_deepc::signals::ReferenceKind;

fn fixture() -> &'static (ExperimentConfig, Arc<DeepcContext>) {
    static FIX: OnceLock<(ExperimentConfig, Arc<DeepcContext>)> = OnceLock::new();
    FIX.get_or_init(|| {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
        let cfg = ExperimentConfig::load(&path).unwrap();
        let data = generate_data(&cfg).unwrap();
        let hankel = hankel_from_data(&cfg, &data).unwrap();
        let net = train_network(&cfg, &hankel).unwrap().net;
        let ctx = build_context(&cfg, &net, &hankel).unwrap();
        (cfg, ctx)
    })
}

fn run(cfg: &ExperimentConfig, f: Formulation, reference: &[f64], opts: &ClosedLoopOptions) -> ClosedLoopLog {
    let (_, ctx) = fixture();
    let mut ctrl = NeuralDeepc::new(ctx.clone(), cfg.control_config(f).unwrap()).unwrap();
    let mut plant = Pendulum::new(cfg.plant.params, PlantState::default());
    run_closed_loop(&mut plant, &mut ctrl, reference, opts).unwrap()
}

#[test]
fn zero_reference_keeps_the_pendulum_at_rest() {
    let (cfg, _) = fixture();
    let mut opts = cfg.closed_loop_options();
    opts.input_reference = InputReference::Zero;
    opts.t_sim = 40;
    let reference = vec![0.0; 60];
    for f in [Formulation::P2, Formulation::P3] {
        let log = run(cfg, f, &reference, &opts);
        let y_max = log.y.iter().fold(0.0f64, |a, y| a.max(y.abs()));
        assert!(y_max < 0.05, "{f}: max |y| = {y_max}");
        assert!(log.converged.iter().all(|&c| c), "{f}");
    }
}

#[test]
fn step_tracking_follows_the_setpoint() {
    let (cfg, _) = fixture();
    let reference = cfg.reference_signal().unwrap();
    let log = run(cfg, Formulation::P3, &reference, &cfg.closed_loop_options());
    let ReferenceKind::Steps { dwell, .. } = cfg.reference.kind else {
        panic!("smoke config uses steps")
    };
    let errors = log.settled_errors(dwell, 0.3);
    assert_eq!(errors.len(), 2);
    for e in errors {
        assert!(e < 0.1, "settled error {e}");
    }
    let m = compute_metrics(&log, cfg.control.q, cfg.control.r);
    assert!(m.j_track.is_finite() && m.j_ise > 0.0);
    assert!(log.u.iter().all(|u| u.abs() <= 4.0 + 1e-9));
}

#[test]
fn runs_are_deterministic_and_noise_follows_the_seed() {
    let (cfg, _) = fixture();
    let reference = cfg.reference_signal().unwrap();
    let mut opts = cfg.closed_loop_options();
    opts.t_sim = 30;
    let a = run(cfg, Formulation::P3, &reference, &opts);
    let b = run(cfg, Formulation::P3, &reference, &opts);
    assert_eq!(a.u, b.u);
    assert_eq!(a.y, b.y);

    opts.noise_std = 0.01;
    let n1 = run(cfg, Formulation::P3, &reference, &opts);
    let n2 = run(cfg, Formulation::P3, &reference, &opts);
    opts.seed += 1;
    let n3 = run(cfg, Formulation::P3, &reference, &opts);
    assert_eq!(n1.y, n2.y);
    assert_ne!(n1.y, n3.y);
    assert_ne!(n1.y, a.y);
}

#[test]
fn no_slack_variant_tracks_a_chirp() {
    let (cfg, _) = fixture();
    let mut cfg = cfg.clone();
    cfg.reference.kind = ReferenceKind::Chirp {
        amplitude: 0.2,
        f_start: 0.05,
        f_end: 0.2,
        ts: cfg.plant.params.ts,
    };
    cfg.reference.t_sim = 60;
    let reference = cfg.reference_signal().unwrap();
    let log = run(&cfg, Formulation::P3NoSlack, &reference, &cfg.closed_loop_options());
    assert_eq!(log.len(), 60);
    let rms = (log.y.iter().zip(&log.r).map(|(y, r)| (y - r).powi(2)).sum::<f64>() / 60.0).sqrt();
    assert!(rms < 0.1, "rms tracking error {rms}");
}
