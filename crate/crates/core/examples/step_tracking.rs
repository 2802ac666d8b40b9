//! Closed-loop run of the configured formulation; writes the log CSV.
//!
//! `cargo run --release --example step_tracking [config.toml] [out.csv]`
//!
//! With `configs/pendulum_chirp.toml` this runs the chirp experiment instead.

use std::path::PathBuf;

use neural_deepc::controllers::NeuralDeepc;
use neural_deepc::experiment::{build_context, generate_data, hankel_from_data, train_network, ExperimentConfig};
use neural_deepc::harness::{compute_metrics, run_closed_loop, scalar_weights};
use neural_deepc::plant::{Pendulum, PlantState};

fn main() -> neural_deepc::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("step_tracking.csv"));

    let cfg = ExperimentConfig::load(&path)?;
    let hs = hankel_from_data(&cfg, &generate_data(&cfg)?)?;
    let ctx = build_context(&cfg, &train_network(&cfg, &hs)?.net, &hs)?;
    let f = cfg.control_formulation();
    let base = cfg.control_config(f)?;
    let mut ctrl = NeuralDeepc::new(ctx, base.clone())?;
    let mut plant = Pendulum::new(cfg.plant.params, PlantState::default());
    let mut log = run_closed_loop(&mut plant, &mut ctrl, &cfg.reference_signal()?, &cfg.closed_loop_options())?;
    log.meta.config_hash = cfg.hash();

    for k in (0..log.len()).step_by((log.len() / 12).max(1)) {
        println!("k={k:4}  r={:+.3}  y={:+.4}  u={:+.3}", log.r[k], log.y[k], log.u[k]);
    }
    let (q, r) = scalar_weights(&base)?;
    let m = compute_metrics(&log, q, r);
    println!(
        "{f}: J_ISE {:.4}  J_IAE {:.4}  J_u {:.4}  J_track {:.4}  mean solve {:.2e} s",
        m.j_ise, m.j_iae, m.j_u, m.j_track, m.mean_solve_s
    );
    log.write_csv(&out)?;
    println!("log written to {}", out.display());
    Ok(())
}
