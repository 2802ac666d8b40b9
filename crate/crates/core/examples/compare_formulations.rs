//! Runs the same step experiment under P1, P2 and P3 and prints the comparison table.
//!
//! `cargo run --release --example compare_formulations [config.toml]`
//!
//! `configs/pendulum_compare.toml` gives the full 600-step comparison (a few minutes,
//! most of it in P1).

use std::path::PathBuf;

use neural_deepc::controllers::Formulation;
use neural_deepc::experiment::{build_context, generate_data, hankel_from_data, train_network, ExperimentConfig};
use neural_deepc::harness::{compare_formulations, Experiment};
use neural_deepc::plant::{Pendulum, Plant, PlantState};

fn main() -> neural_deepc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let hs = hankel_from_data(&cfg, &generate_data(&cfg)?)?;
    let ctx = build_context(&cfg, &train_network(&cfg, &hs)?.net, &hs)?;

    let reference = cfg.reference_signal()?;
    let params = cfg.plant.params;
    let make = move || Box::new(Pendulum::new(params, PlantState::default())) as Box<dyn Plant>;
    let experiment = Experiment {
        make_plant: &make,
        reference: &reference,
        opts: cfg.closed_loop_options(),
    };
    let base = cfg.control_config(Formulation::P3)?;
    let (report, logs) = compare_formulations(
        ctx,
        &base,
        &[Formulation::P1, Formulation::P2, Formulation::P3],
        &experiment,
    )?;
    print!("{}", report.to_table());
    if let neural_deepc::signals::ReferenceKind::Steps { dwell, .. } = &cfg.reference.kind {
        for log in &logs {
            println!("{}: settled |y - r| per dwell {:.4?}", log.meta.label, log.settled_errors(*dwell, 0.3));
        }
    }
    Ok(())
}
