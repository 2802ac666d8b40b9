//! Classical DeePC as the identity-basis special case, on a noise-free second-order
//! linear system. The closed loop is checked against the open-loop prediction.

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use neural_deepc::controllers::{ControlConfig, Formulation, NeuralDeepc};
use neural_deepc::hankel::{build_hankel, TrajectoryData};
use neural_deepc::harness::{compute_metrics, run_closed_loop, ClosedLoopOptions, InputReference, ReferencePreview};
use neural_deepc::plant::Plant;
use neural_deepc::predictors::DeepcContext;
use rand::{Rng, SeedableRng};

struct Lti {
    x: Vector2<f64>,
}

impl Lti {
    const A: Matrix2<f64> = Matrix2::new(0.9, 0.2, -0.1, 0.8);
    const B: Vector2<f64> = Vector2::new(0.0, 1.0);
}

impl Plant for Lti {
    fn num_inputs(&self) -> usize {
        1
    }
    fn num_outputs(&self) -> usize {
        1
    }
    fn step(&mut self, u: &[f64]) {
        self.x = Self::A * self.x + Self::B * u[0];
    }
    fn output(&self) -> Vec<f64> {
        vec![self.x[0]]
    }
}

fn main() -> neural_deepc::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut plant = Lti { x: Vector2::zeros() };
    let (mut u, mut y) = (Vec::new(), Vec::new());
    for _ in 0..150 {
        let ui = rng.random_range(-1.0..1.0);
        y.push(plant.output()[0]);
        u.push(ui);
        plant.step(&[ui]);
    }
    let hs = build_hankel(&TrajectoryData::from_siso(&u, &y)?, 2, 8)?;
    let ctx = Arc::new(DeepcContext::linear(&hs, 1e-10)?);
    println!("H {:?}, Phi_bar equals H: {}", hs.h.shape(), ctx.phi_bar == hs.h);

    let mut cfg = ControlConfig::siso(10.0, 0.1, 1e6).with_formulation(Formulation::P1);
    cfg.u_bounds = (-2.0, 2.0);
    cfg.y_bounds = (-5.0, 5.0);
    let mut ctrl = NeuralDeepc::new(ctx, cfg)?;
    let reference: Vec<f64> = (0..110).map(|k| if k < 50 { 1.0 } else { -1.0 }).collect();
    let opts = ClosedLoopOptions {
        t_sim: 100,
        input_reference: InputReference::Zero,
        preview: ReferencePreview::Hold,
        noise_std: 0.0,
        seed: 0,
    };
    let log = run_closed_loop(&mut Lti { x: Vector2::zeros() }, &mut ctrl, &reference, &opts)?;
    for k in (0..log.len()).step_by(10) {
        println!("k={k:3}  r={:+.2}  y={:+.4}  u={:+.4}", log.r[k], log.y[k], log.u[k]);
    }
    let m = compute_metrics(&log, 10.0, 0.1);
    println!("J_track {:.4}, mean solve {:.2e} s", m.j_track, m.mean_solve_s);
    Ok(())
}
