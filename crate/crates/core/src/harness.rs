//! Closed-loop simulation, performance indexes and formulation comparison.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controllers::{ControlConfig, ControlStepResult, Formulation, NeuralDeepc, StepInput};
use crate::error::{Error, Result};
use crate::hankel::RegressorLayout;
use crate::plant::Plant;
use crate::predictors::DeepcContext;

/// Exact header of the closed-loop CSV log.
pub const LOG_HEADER: &str = "k,u,y,r,u_ref,solve_s,converged";

/// Anything that maps past data and references to an input plan.
pub trait RecedingHorizonController {
    fn layout(&self) -> RegressorLayout;
    fn step(&mut self, input: &StepInput<'_>) -> Result<ControlStepResult>;
}

impl RecedingHorizonController for NeuralDeepc {
    fn layout(&self) -> RegressorLayout {
        self.context().layout
    }

    fn step(&mut self, input: &StepInput<'_>) -> Result<ControlStepResult> {
        self.solve(input)
    }
}

/// Input reference paired with an output reference level.
#[derive(Debug, Clone, Copy)]
pub enum InputReference {
    Zero,
    /// `u_r = a sin(y_r)`: the pendulum's holding torque with `a = M L g / 2`.
    Sine { amplitude: f64 },
}

impl InputReference {
    pub fn at(&self, y_ref: f64) -> f64 {
        match *self {
            InputReference::Zero => 0.0,
            InputReference::Sine { amplitude } => amplitude * y_ref.sin(),
        }
    }
}

/// What the controller sees of the reference at time `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferencePreview {
    /// The current value `r(k)` as a setpoint over the whole horizon.
    #[default]
    Hold,
    /// The future samples `r(k+1..k+N)`.
    Preview,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopOptions {
    pub t_sim: usize,
    pub input_reference: InputReference,
    pub preview: ReferencePreview,
    /// Standard deviation of additive output noise.
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub label: String,
    pub lambda: f64,
    pub t_ini: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// One row per sample. Rows `k < t_ini` are the zero-input warmup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClosedLoopLog {
    pub meta: LogMeta,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub solve_s: Vec<f64>,
    pub converged: Vec<bool>,
}

impl ClosedLoopLog {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn push(&mut self, u: f64, y: f64, r: f64, u_ref: f64, solve_s: f64, converged: bool) {
        self.u.push(u);
        self.y.push(y);
        self.r.push(r);
        self.u_ref.push(u_ref);
        self.solve_s.push(solve_s);
        self.converged.push(converged);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{LOG_HEADER}")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{k},{},{},{},{},{},{}",
                self.u[k],
                self.y[k],
                self.r[k],
                self.u_ref[k],
                self.solve_s[k],
                u8::from(self.converged[k])
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a log written by [`ClosedLoopLog::write_csv`]; metadata is left empty.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Parse(format!("{}: empty log", path.display())))?;
        if header.trim() != LOG_HEADER {
            return Err(Error::Parse(format!(
                "{}: header `{}` is not `{LOG_HEADER}`",
                path.display(),
                header.trim()
            )));
        }
        let mut log = ClosedLoopLog::default();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = i + 2;
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Parse(format!("{}:{row}: expected 7 fields", path.display())));
            }
            let num = |j: usize| {
                fields[j]
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}:{row}: field {j}: {e}", path.display())))
            };
            let k: usize = fields[0]
                .parse()
                .map_err(|e| Error::Parse(format!("{}:{row}: k: {e}", path.display())))?;
            if k != log.len() {
                return Err(Error::Parse(format!("{}:{row}: k = {k} out of sequence", path.display())));
            }
            let converged = match fields[6] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::Parse(format!("{}:{row}: bad converged flag `{other}`", path.display())));
                }
            };
            log.push(num(1)?, num(2)?, num(3)?, num(4)?, num(5)?, converged);
        }
        Ok(log)
    }

    /// Largest `|y - r|` over the last `fraction` of every dwell of length `dwell`.
    pub fn settled_errors(&self, dwell: usize, fraction: f64) -> Vec<f64> {
        let tail = ((dwell as f64) * fraction).ceil() as usize;
        (0..self.len() / dwell)
            .map(|d| {
                let end = (d + 1) * dwell;
                (end - tail..end)
                    .map(|k| (self.y[k] - self.r[k]).abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Runs `controller` on `plant` for `opts.t_sim` samples.
///
/// The first `T_ini` samples apply zero input to fill the windows. At `k >= T_ini` the
/// controller sees `u(k-T_ini..k-1)`, `y(k-T_ini+1..k)` and the reference per
/// [`ReferencePreview`]. The logged `u_ref(k)` is the first input reference of the step.
pub fn run_closed_loop(
    plant: &mut dyn Plant,
    controller: &mut dyn RecedingHorizonController,
    reference: &[f64],
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopLog> {
    let layout = controller.layout();
    if layout.m != 1 || layout.p != 1 || plant.num_inputs() != 1 || plant.num_outputs() != 1 {
        return Err(Error::Dimension(format!(
            "closed-loop logging is single-input single-output; got m = {}, p = {}",
            layout.m, layout.p
        )));
    }
    let (t_ini, n) = (layout.t_ini, layout.horizon);
    if reference.len() < opts.t_sim + n {
        return Err(Error::Config(format!(
            "reference has {} samples, needs T_sim + N = {}",
            reference.len(),
            opts.t_sim + n
        )));
    }
    if opts.t_sim <= t_ini {
        return Err(Error::Config(format!("T_sim = {} does not exceed T_ini = {t_ini}", opts.t_sim)));
    }
    let noise = Normal::new(0.0, opts.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise standard deviation: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut log = ClosedLoopLog {
        meta: LogMeta {
            t_ini,
            seed: opts.seed,
            ..LogMeta::default()
        },
        ..ClosedLoopLog::default()
    };
    for k in 0..opts.t_sim {
        let mut y = plant.output()[0];
        if opts.noise_std > 0.0 {
            y += noise.sample(&mut rng);
        }
        let y_ref = match opts.preview {
            ReferencePreview::Hold => vec![reference[k]; n],
            ReferencePreview::Preview => reference[k + 1..k + 1 + n].to_vec(),
        };
        let u_ref: Vec<f64> = y_ref.iter().map(|&r| opts.input_reference.at(r)).collect();
        if k < t_ini {
            log.push(0.0, y, reference[k], u_ref[0], 0.0, true);
            plant.step(&[0.0]);
            continue;
        }
        let u_ini = &log.u[k - t_ini..k];
        let mut y_ini = log.y[k + 1 - t_ini..k].to_vec();
        y_ini.push(y);
        let res = controller.step(&StepInput {
            u_ini,
            y_ini: &y_ini,
            y_ref: &y_ref,
            u_ref: &u_ref,
        })?;
        let u = res.u_applied[0];
        log.push(u, y, reference[k], u_ref[0], res.solve_seconds, res.converged);
        plant.step(&[u]);
    }
    Ok(log)
}

/// Performance indexes of one closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub j_ise: f64,
    pub j_iae: f64,
    pub j_u: f64,
    pub j_track: f64,
    pub mean_solve_s: f64,
    pub max_solve_s: f64,
    pub convergence_rate: f64,
}

/// Evaluates the indexes over every row. Solve statistics cover the controlled
/// rows `k >= t_ini` only.
pub fn compute_metrics(log: &ClosedLoopLog, q: f64, r: f64) -> MetricsReport {
    let mut m = MetricsReport {
        j_ise: 0.0,
        j_iae: 0.0,
        j_u: 0.0,
        j_track: 0.0,
        mean_solve_s: 0.0,
        max_solve_s: 0.0,
        convergence_rate: 1.0,
    };
    for k in 0..log.len() {
        let e = log.y[k] - log.r[k];
        let du = log.u[k] - log.u_ref[k];
        m.j_ise += e * e;
        m.j_iae += e.abs();
        m.j_u += log.u[k].abs();
        m.j_track += q * e * e + r * du * du;
    }
    let solved = log.meta.t_ini.min(log.len())..log.len();
    if !solved.is_empty() {
        let count = solved.len() as f64;
        m.mean_solve_s = log.solve_s[solved.clone()].iter().sum::<f64>() / count;
        m.max_solve_s = log.solve_s[solved.clone()].iter().copied().fold(0.0, f64::max);
        m.convergence_rate = log.converged[solved].iter().filter(|&&c| c).count() as f64 / count;
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub metrics: MetricsReport,
    /// `(J - J_first) / |J_first|` for `[J_ISE, J_IAE, J_u, J_track]`.
    pub relative_delta: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn new(runs: Vec<(String, MetricsReport)>) -> Self {
        let first = runs.first().map(|(_, m)| *m);
        let rows = runs
            .into_iter()
            .map(|(label, metrics)| {
                let rel = |a: f64, b: f64| if b == 0.0 { 0.0 } else { (a - b) / b.abs() };
                let relative_delta = match first {
                    Some(f) => [
                        rel(metrics.j_ise, f.j_ise),
                        rel(metrics.j_iae, f.j_iae),
                        rel(metrics.j_u, f.j_u),
                        rel(metrics.j_track, f.j_track),
                    ],
                    None => [0.0; 4],
                };
                ComparisonRow {
                    label,
                    metrics,
                    relative_delta,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned console table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}\n",
            "formulation", "J_ISE", "J_IAE", "J_u", "J_track", "mean_s", "max_s", "conv"
        );
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:<12} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.6} {:>12.6} {:>8.3}\n",
                r.label, m.j_ise, m.j_iae, m.j_u, m.j_track, m.mean_solve_s, m.max_solve_s, m.convergence_rate
            ));
        }
        s
    }
}

/// Plant factory and experiment shared by every formulation in a comparison.
pub struct Experiment<'a> {
    pub make_plant: &'a dyn Fn() -> Box<dyn Plant>,
    pub reference: &'a [f64],
    pub opts: ClosedLoopOptions,
}

/// Runs each formulation on the identical experiment, sequentially so solve
/// times are not disturbed by one another. The first formulation is the
/// baseline for the relative deltas.
pub fn compare_formulations(
    ctx: Arc<DeepcContext>,
    base: &ControlConfig,
    formulations: &[Formulation],
    experiment: &Experiment<'_>,
) -> Result<(ComparisonReport, Vec<ClosedLoopLog>)> {
    let (q, r) = scalar_weights(base)?;
    let mut runs = Vec::new();
    let mut logs = Vec::new();
    for &f in formulations {
        let mut ctrl = NeuralDeepc::new(ctx.clone(), base.clone().with_formulation(f))?;
        let mut plant = (experiment.make_plant)();
        let mut log = run_closed_loop(plant.as_mut(), &mut ctrl, experiment.reference, &experiment.opts)?;
        log.meta.label = f.name().to_string();
        log.meta.lambda = base.lambda;
        runs.push((f.name().to_string(), compute_metrics(&log, q, r)));
        logs.push(log);
    }
    Ok((ComparisonReport::new(runs), logs))
}

/// The scalar `(Q, R)` of a single-input single-output configuration.
pub fn scalar_weights(cfg: &ControlConfig) -> Result<(f64, f64)> {
    if cfg.q.shape() != (1, 1) || cfg.r.shape() != (1, 1) {
        return Err(Error::Dimension("metrics need scalar Q and R".into()));
    }
    Ok((cfg.q[(0, 0)], cfg.r[(0, 0)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step_log() -> ClosedLoopLog {
        ClosedLoopLog {
            meta: LogMeta {
                t_ini: 0,
                ..LogMeta::default()
            },
            u: vec![1.0, -0.5],
            y: vec![2.0, 0.0],
            r: vec![1.0, 2.0],
            u_ref: vec![0.0, 0.5],
            solve_s: vec![0.25, 0.75],
            converged: vec![true, false],
        }
    }

    #[test]
    fn hand_computed_two_step_metrics() {
        let m = compute_metrics(&two_step_log(), 200.0, 0.5);
        // errors 1, -2; input deviations 1, -1
        assert_eq!(m.j_ise, 5.0);
        assert_eq!(m.j_iae, 3.0);
        assert_eq!(m.j_u, 1.5);
        assert_eq!(m.j_track, 200.0 * 5.0 + 0.5 * 2.0);
        assert_eq!(m.mean_solve_s, 0.5);
        assert_eq!(m.max_solve_s, 0.75);
        assert_eq!(m.convergence_rate, 0.5);
    }

    #[test]
    fn single_step_j_track_example() {
        let log = ClosedLoopLog {
            u: vec![1.0],
            y: vec![2.0],
            r: vec![0.0],
            u_ref: vec![0.0],
            solve_s: vec![0.0],
            converged: vec![true],
            ..ClosedLoopLog::default()
        };
        assert_eq!(compute_metrics(&log, 200.0, 0.5).j_track, 800.5);
    }

    #[test]
    fn zero_error_log_has_zero_indexes() {
        let log = ClosedLoopLog {
            u: vec![0.0; 3],
            y: vec![0.3; 3],
            r: vec![0.3; 3],
            u_ref: vec![0.0; 3],
            solve_s: vec![0.0; 3],
            converged: vec![true; 3],
            ..ClosedLoopLog::default()
        };
        let m = compute_metrics(&log, 200.0, 0.5);
        assert_eq!([m.j_ise, m.j_iae, m.j_u, m.j_track], [0.0; 4]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = two_step_log();
        log.y[1] = 0.1 + 0.2;
        log.u[0] = std::f64::consts::PI / 7.0;
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,u,y,r,u_ref,solve_s,converged\n"));
        let back = ClosedLoopLog::read_csv(&path).unwrap();
        assert_eq!(back.u, log.u);
        assert_eq!(back.y, log.y);
        assert_eq!(back.converged, log.converged);
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(&path, "k,u,y\n0,1,2\n").unwrap();
        assert_eq!(ClosedLoopLog::read_csv(&path).unwrap_err().category(), "parse");
        std::fs::write(&path, "").unwrap();
        assert_eq!(ClosedLoopLog::read_csv(&path).unwrap_err().category(), "parse");
    }

    #[test]
    fn settled_errors_look_at_dwell_tails() {
        let mut log = ClosedLoopLog::default();
        for k in 0..20 {
            let r = if k < 10 { 1.0 } else { -1.0 };
            let y = if k % 10 < 5 { 0.0 } else { r + 0.01 * (k as f64) };
            log.push(0.0, y, r, 0.0, 0.0, true);
        }
        let errs = log.settled_errors(10, 0.3);
        assert_eq!(errs.len(), 2);
        assert!((errs[0] - 0.09).abs() < 1e-12);
        assert!((errs[1] - 0.19).abs() < 1e-12);
    }

    #[test]
    fn sine_input_reference_is_the_holding_torque() {
        let u = InputReference::Sine { amplitude: 4.905 };
        assert!((u.at(std::f64::consts::FRAC_PI_2) - 4.905).abs() < 1e-12);
        assert_eq!(InputReference::Zero.at(1.0), 0.0);
    }
}
