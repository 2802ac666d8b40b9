//! Trains the neural basis, refits the output layer by least squares and reports
//! the equivalence certificate.
//!
//! `cargo run --release --example train_and_certify [config.toml]`

use std::path::PathBuf;

use neural_deepc::experiment::{build_context, generate_data, hankel_from_data, train_network, ExperimentConfig};
use neural_deepc::predictors::equivalence_certificate;

fn main() -> neural_deepc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let hs = hankel_from_data(&cfg, &generate_data(&cfg)?)?;

    let outcome = train_network(&cfg, &hs)?;
    for rec in outcome.history.iter().step_by((outcome.history.len() / 8).max(1)) {
        println!("epoch {:6}  loss {:.6e}", rec.epoch, rec.loss);
    }
    let ctx = build_context(&cfg, &outcome.net, &hs)?;
    println!(
        "fit cost: trained {:.6e}, refit {:.6e}",
        ctx.refit.cost_before, ctx.refit.cost_after
    );
    println!("Phi_bar {:?}, min singular value of [Phi_bar; 1^T] {:.4e}", ctx.phi_bar.shape(), ctx.min_singular_value);

    let cert = equivalence_certificate(&ctx, &ctx.residual(), cfg.certify.tolerance)?;
    println!(
        "residual |E|_F {:.4e}, certificate {:.4e}, null space dim {}, equivalent: {}",
        cert.residual_frobenius, cert.value, cert.null_dim, cert.equivalent
    );
    Ok(())
}
