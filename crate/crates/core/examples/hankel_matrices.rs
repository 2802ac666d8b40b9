//! Hankel matrices and regressor layout for an identification record.
//!
//! `cargo run --example hankel_matrices [config.toml]`

use std::path::PathBuf;

use neural_deepc::experiment::{generate_data, hankel_from_data, ExperimentConfig};

fn main() -> neural_deepc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let data = generate_data(&cfg)?;
    let hs = hankel_from_data(&cfg, &data)?;
    let l = hs.layout;
    println!("record: {} samples, T_ini = {}, N = {}", data.len(), l.t_ini, l.horizon);
    println!("U_p {:?}  Y_p {:?}  U_f {:?}  Y_f {:?}", hs.u_p.shape(), hs.y_p.shape(), hs.u_f.shape(), hs.y_f.shape());
    println!("H = [U_p; Y_p; U_f] {:?}", hs.h.shape());
    println!("columns needed for a unique fit: {}", l.min_columns());

    // column j of Y_f is the output window that follows column j of H
    let j = hs.columns() / 2;
    println!("column {j}: u_f = {:.3?}", hs.u_f.column(j).as_slice());
    println!("           y_f = {:.3?}", hs.y_f.column(j).as_slice());
    Ok(())
}
