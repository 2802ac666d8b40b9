//! Discrete-time plants: a small generic interface and the damped pendulum.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A simulated discrete-time system with `m` inputs and `p` outputs.
pub trait Plant {
    fn num_inputs(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// Advances one sample under input `u`.
    fn step(&mut self, u: &[f64]);
    /// Noise-free output of the current state.
    fn output(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub ts: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.1,
            ts: 0.033,
        }
    }
}

impl PendulumParams {
    /// Rod inertia about the pivot, `M L^2 / 3`.
    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length / 3.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mass, self.length, self.gravity, self.damping, self.ts];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("pendulum parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Torque holding the pendulum at rest at angle `y`.
    pub fn equilibrium_torque(&self, y: f64) -> f64 {
        0.5 * self.mass * self.length * self.gravity * y.sin()
    }

    /// Jacobian of the step map at the origin, row-major 2x2.
    pub fn linearization(&self) -> [[f64; 2]; 2] {
        let j = self.inertia();
        [
            [
                1.0 - self.damping * self.ts / j,
                -self.mass * self.length * self.gravity * self.ts / (2.0 * j),
            ],
            [self.ts, 1.0],
        ]
    }
}

/// `x1` is the angular velocity, `x2` the angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub x1: f64,
    pub x2: f64,
}

/// Forward-Euler step of the damped pendulum.
pub fn pendulum_step(p: &PendulumParams, x: PlantState, u: f64) -> PlantState {
    let j = p.inertia();
    let ts = p.ts;
    PlantState {
        x1: (1.0 - p.damping * ts / j) * x.x1 + (ts / j) * u
            - (p.mass * p.length * p.gravity * ts / (2.0 * j)) * x.x2.sin(),
        x2: ts * x.x1 + x.x2,
    }
}

/// Angle measurement with additive Gaussian noise. The generator is untouched when
/// `noise_std` is zero.
pub fn measure<R: Rng + ?Sized>(x: PlantState, noise_std: f64, rng: &mut R) -> f64 {
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).expect("finite positive std");
        x.x2 + n.sample(rng)
    } else {
        x.x2
    }
}

/// Applies `u_seq` from `x0`; entry `k` of the result is measured after `u_seq[k]`.
pub fn open_loop_rollout<R: Rng + ?Sized>(
    p: &PendulumParams,
    x0: PlantState,
    u_seq: &[f64],
    noise_std: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut x = x0;
    u_seq
        .iter()
        .map(|&u| {
            x = pendulum_step(p, x, u);
            measure(x, noise_std, rng)
        })
        .collect()
}

/// Identification record: entry `k` is measured before `u_seq[k]` is applied, so the
/// first entry is the initial output and the response to the last input is not
/// recorded. This is the sample convention of [`crate::hankel::TrajectoryData`].
pub fn record_trajectory<R: Rng + ?Sized>(
    p: &PendulumParams,
    x0: PlantState,
    u_seq: &[f64],
    noise_std: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut x = x0;
    u_seq
        .iter()
        .map(|&u| {
            let y = measure(x, noise_std, rng);
            x = pendulum_step(p, x, u);
            y
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    pub params: PendulumParams,
    pub state: PlantState,
}

impl Pendulum {
    pub fn new(params: PendulumParams, state: PlantState) -> Self {
        Self { params, state }
    }
}

impl Plant for Pendulum {
    fn num_inputs(&self) -> usize {
        1
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn step(&mut self, u: &[f64]) {
        self.state = pendulum_step(&self.params, self.state, u[0]);
    }

    fn output(&self) -> Vec<f64> {
        vec![self.state.x2]
    }
}

/// Writes `k,u,y` rows for a single-input single-output rollout.
pub fn write_rollout_csv(path: &Path, u: &[f64], y: &[f64]) -> Result<()> {
    if u.len() != y.len() {
        return Err(Error::Dimension(format!(
            "rollout csv: {} inputs vs {} outputs",
            u.len(),
            y.len()
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "k,u,y")?;
    for (k, (a, b)) in u.iter().zip(y).enumerate() {
        writeln!(w, "{k},{a},{b}")?;
    }
    w.flush()?;
    Ok(())
}
