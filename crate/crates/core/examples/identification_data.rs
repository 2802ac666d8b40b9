//! Open-loop identification experiment on the pendulum with a multisine torque.

use neural_deepc::plant::{open_loop_rollout, PendulumParams, PlantState};
use neural_deepc::signals::{multisine, MultisineSpec};
use rand::SeedableRng;

fn main() -> neural_deepc::Result<()> {
    let u = multisine(&MultisineSpec::default())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let y = open_loop_rollout(&PendulumParams::default(), PlantState::default(), &u, 0.0, &mut rng);
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!("samples: {}", u.len());
    println!("output range: [{lo:.4}, {hi:.4}] rad");
    for k in (0..u.len()).step_by(100) {
        println!("k={k:4}  u={:+.3}  y={:+.4}", u[k], y[k]);
    }
    Ok(())
}
