//! One receding-horizon step with each formulation from the same past windows.
//!
//! `cargo run --release --example solve_one_step [config.toml]`

use std::path::PathBuf;

use neural_deepc::controllers::{Formulation, NeuralDeepc, StepInput};
use neural_deepc::experiment::{build_context, generate_data, hankel_from_data, train_network, ExperimentConfig};

fn main() -> neural_deepc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let data = generate_data(&cfg)?;
    let hs = hankel_from_data(&cfg, &data)?;
    let ctx = build_context(&cfg, &train_network(&cfg, &hs)?.net, &hs)?;
    let l = ctx.layout;

    // past windows taken from the identification record, then ask for 0.3 rad
    let k = data.len() / 2;
    let u_ini: Vec<f64> = (k - l.t_ini..k).map(|i| data.u[(0, i)]).collect();
    let y_ini: Vec<f64> = (k - l.t_ini + 1..=k).map(|i| data.y[(0, i)]).collect();
    let y_ref = vec![0.3; l.horizon];
    let u_ref = vec![cfg.plant.params.equilibrium_torque(0.3); l.horizon];
    let input = StepInput {
        u_ini: &u_ini,
        y_ini: &y_ini,
        y_ref: &y_ref,
        u_ref: &u_ref,
    };

    for f in Formulation::ALL {
        let ctrl = NeuralDeepc::new(ctx.clone(), cfg.control_config(f)?)?;
        let r = ctrl.solve_from(&input, &ctrl.initial_guess(&input))?;
        println!(
            "{f:>12}: objective {:10.4}  u(0) {:+.4}  |y - y_nls| {:.2e}  aux len {:4}  {:?} in {} it, {:.4} s",
            r.objective,
            r.u_applied[0],
            (&r.y_pred - &r.y_nls).amax(),
            r.aux.len(),
            r.status,
            r.iterations,
            r.solve_seconds
        );
    }
    Ok(())
}
