//! Distance between the optimized output and the network prediction as the
//! regularization weight grows.
//!
//! `cargo run --release --example lambda_sweep [config.toml]`

use std::path::PathBuf;

use neural_deepc::controllers::{Formulation, NeuralDeepc, StepInput};
use neural_deepc::experiment::{build_context, generate_data, hankel_from_data, train_network, ExperimentConfig};

fn main() -> neural_deepc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let hs = hankel_from_data(&cfg, &generate_data(&cfg)?)?;
    let ctx = build_context(&cfg, &train_network(&cfg, &hs)?.net, &hs)?;
    let l = ctx.layout;

    // at rest, asked to move to 0.4 rad
    let p = cfg.plant.params;
    let u_ini = vec![0.0; l.t_ini];
    let y_ini = vec![0.0; l.t_ini];
    let y_ref = vec![0.4; l.horizon];
    let u_ref = vec![p.equilibrium_torque(0.4); l.horizon];
    let input = StepInput {
        u_ini: &u_ini,
        y_ini: &y_ini,
        y_ref: &y_ref,
        u_ref: &u_ref,
    };

    println!("{:>8} {:>12} {:>12} {:>12}", "lambda", "p1", "p2", "p3");
    for lambda in [1e0, 1e2, 1e4, 1e6, 1e8] {
        let gaps: Vec<String> = [Formulation::P1, Formulation::P2, Formulation::P3]
            .into_iter()
            .map(|f| {
                let mut c = cfg.control_config(f)?;
                c.lambda = lambda;
                c.slack_penalty = lambda;
                let ctrl = NeuralDeepc::new(ctx.clone(), c)?;
                let r = ctrl.solve_from(&input, &ctrl.initial_guess(&input))?;
                Ok(format!("{:12.3e}", (&r.y_pred - &r.y_nls).amax()))
            })
            .collect::<neural_deepc::Result<_>>()?;
        println!("{lambda:8.0e} {}", gaps.join(" "));
    }
    Ok(())
}
