//! Neural data-enabled predictive control.
//!
//! An MLP trained offline on Hankel-structured trajectory data supplies a neural
//! basis (its last hidden layer); online, three receding-horizon formulations
//! interpolate in that basis to predict and control a plant.

pub mod cli;
pub mod controllers;
pub mod error;
pub mod experiment;
pub mod hankel;
pub mod harness;
pub mod mlp;
pub mod numerics;
pub mod plant;
pub mod predictors;
pub mod signals;

pub use error::{Error, Result};
