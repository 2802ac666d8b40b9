//! Experiment configuration and the offline/online pipeline steps it drives.
//!
//! The configuration is a TOML file. Every section has defaults matching the
//! pendulum experiment, so an empty file is a valid configuration:
//!
//! ```toml
//! version = 1
//! seed = 0
//!
//! [plant]            # mass, length, gravity, damping, ts, noise_std
//! [excitation]       # multisine: range, band, period, num_periods, num_sines, phase_trials, grid_skip, seed
//! [data]             # t_ini, horizon, rest_prefix, path
//! [network]          # architecture = "mlp" | "linear", widths, activations, init_seed, weights
//! [training]         # learning_rate, batch_size, epochs, seed, beta1, beta2, epsilon, report_every, normalize, target_loss
//! [control]          # q, r, lambda, slack_penalty, u_min, u_max, y_min, y_max, formulation, compare, ...
//! [reference]        # kind = "steps" | "chirp" plus its fields, t_sim
//! [certify]          # tolerance, sv_tol
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{ControlConfig, Formulation, WarmStart};
use crate::error::{Error, Result};
use crate::hankel::{build_hankel, HankelSet, RegressorLayout, TrajectoryData};
use crate::harness::{ClosedLoopOptions, InputReference, ReferencePreview};
use crate::mlp::{train_nls, Activation, MlpNetwork, TrainConfig, TrainOutcome};
use crate::numerics::{Matrix, SqpOptions, DEFAULT_SV_TOL};
use crate::plant::{record_trajectory, PendulumParams, PlantState};
use crate::predictors::{DeepcContext, DEFAULT_EQUIVALENCE_TOL};
use crate::signals::{multisine, reference, MultisineSpec, ReferenceKind, ReferenceSpec};

/// Current configuration format version.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSection {
    #[serde(flatten)]
    pub params: PendulumParams,
    /// Output noise during identification and closed loop.
    pub noise_std: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub t_ini: usize,
    pub horizon: usize,
    /// Prepend `t_ini` rest samples (the experiment starts at the origin).
    pub rest_prefix: bool,
    /// Trajectory CSV; defaults to `data.csv` in the output directory.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            t_ini: 5,
            horizon: 10,
            rest_prefix: true,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Mlp,
    /// Identity hidden map: classical DeePC.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub init_seed: u64,
    /// Weights file; defaults to `weights.json` in the output directory.
    pub weights: Option<PathBuf>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            widths: vec![30],
            activations: vec![Activation::Tanh],
            init_seed: 1,
            weights: None,
        }
    }
}

/// Controller selection in the configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    P1,
    P2,
    P3,
    P3NoSlack,
    /// Problem 1 on the identity hidden map.
    Linear,
    /// Every formulation in `control.compare`.
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputReferenceMode {
    /// Pendulum holding torque at the output reference.
    Equilibrium,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSection {
    pub q: f64,
    pub r: f64,
    pub lambda: f64,
    pub slack_penalty: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub formulation: ControlMode,
    pub compare: Vec<Formulation>,
    pub warm_start: WarmStart,
    pub preview: ReferencePreview,
    pub input_reference: InputReferenceMode,
    pub max_iterations: usize,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        let sqp = SqpOptions::default();
        Self {
            q: 200.0,
            r: 0.5,
            lambda: 1e4,
            slack_penalty: 1e4,
            u_min: -4.0,
            u_max: 4.0,
            y_min: -std::f64::consts::PI,
            y_max: std::f64::consts::PI,
            formulation: ControlMode::P3,
            compare: vec![Formulation::P1, Formulation::P2, Formulation::P3],
            warm_start: WarmStart::Shift,
            preview: ReferencePreview::Hold,
            input_reference: InputReferenceMode::Equilibrium,
            max_iterations: sqp.max_iterations,
            feasibility_tol: sqp.feasibility_tol,
            optimality_tol: sqp.optimality_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSection {
    #[serde(flatten)]
    pub kind: ReferenceKind,
    pub t_sim: usize,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self {
            kind: ReferenceKind::Steps {
                levels: vec![0.5, -0.5],
                dwell: 150,
            },
            t_sim: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifySection {
    pub tolerance: f64,
    pub sv_tol: f64,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_EQUIVALENCE_TOL,
            sv_tol: DEFAULT_SV_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Seed of the closed-loop measurement noise.
    pub seed: u64,
    /// Output directory when none is given on the command line.
    pub out_dir: Option<PathBuf>,
    pub plant: PlantSection,
    pub excitation: MultisineSpec,
    pub data: DataSection,
    pub network: NetworkSection,
    pub training: TrainConfig,
    pub control: ControlSection,
    pub reference: ReferenceSection,
    pub certify: CertifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: None,
            plant: PlantSection::default(),
            excitation: MultisineSpec::default(),
            data: DataSection::default(),
            network: NetworkSection::default(),
            training: TrainConfig::default(),
            control: ControlSection::default(),
            reference: ReferenceSection::default(),
            certify: CertifySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = None;
        let json = serde_json::to_string(&canon).expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn layout(&self) -> Result<RegressorLayout> {
        RegressorLayout::new(1, 1, self.data.t_ini, self.data.horizon)
    }

    /// Samples in the identification record.
    pub fn samples(&self) -> usize {
        self.excitation.period * self.excitation.num_periods
    }

    /// Hankel columns the identification record yields.
    pub fn columns(&self) -> usize {
        let prefix = if self.data.rest_prefix { self.data.t_ini } else { 0 };
        (self.samples() + prefix).saturating_sub(self.data.t_ini + self.data.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "configuration version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.plant.params.validate()?;
        if !(self.plant.noise_std >= 0.0 && self.plant.noise_std.is_finite()) {
            return Err(Error::Config("plant.noise_std must be finite and >= 0".into()));
        }
        self.excitation.validate()?;
        let layout = self.layout()?;
        let t = self.columns();
        if t < layout.min_columns() {
            return Err(Error::Config(format!(
                "data yields T = {t} columns; need T >= (m+p) T_ini + m N = {}",
                layout.min_columns()
            )));
        }
        if self.network.architecture == Architecture::Mlp
            && (self.network.widths.is_empty()
                || self.network.widths.len() != self.network.activations.len()
                || self.network.widths.contains(&0))
        {
            return Err(Error::Config(
                "network.widths and network.activations must be nonempty, positive and of equal length".into(),
            ));
        }
        if !(self.training.learning_rate > 0.0) || self.training.epochs == 0 {
            return Err(Error::Config("training needs a positive learning rate and epochs >= 1".into()));
        }
        if self.control.compare.is_empty() {
            return Err(Error::Config("control.compare must list at least one formulation".into()));
        }
        self.control_config(self.control_formulation())?.validate(1, 1)?;
        self.reference_spec().validate()?;
        if self.reference.t_sim <= self.data.t_ini {
            return Err(Error::Config(format!(
                "reference.t_sim = {} must exceed T_ini = {}",
                self.reference.t_sim, self.data.t_ini
            )));
        }
        if !(self.certify.tolerance >= 0.0 && self.certify.sv_tol > 0.0) {
            return Err(Error::Config("certify.tolerance must be >= 0 and sv_tol > 0".into()));
        }
        Ok(())
    }

    /// The formulation a single simulation runs.
    pub fn control_formulation(&self) -> Formulation {
        match self.control.formulation {
            ControlMode::P1 | ControlMode::Linear => Formulation::P1,
            ControlMode::P2 => Formulation::P2,
            ControlMode::P3 => Formulation::P3,
            ControlMode::P3NoSlack => Formulation::P3NoSlack,
            ControlMode::Compare => self.control.compare[0],
        }
    }

    pub fn control_config(&self, formulation: Formulation) -> Result<ControlConfig> {
        let c = &self.control;
        let mut cfg = ControlConfig::siso(c.q, c.r, c.lambda).with_formulation(formulation);
        cfg.slack_penalty = c.slack_penalty;
        cfg.u_bounds = (c.u_min, c.u_max);
        cfg.y_bounds = (c.y_min, c.y_max);
        cfg.warm_start = c.warm_start;
        cfg.solver = SqpOptions {
            max_iterations: c.max_iterations,
            feasibility_tol: c.feasibility_tol,
            optimality_tol: c.optimality_tol,
            ..SqpOptions::default()
        };
        if c.max_iterations == 0 {
            return Err(Error::Config("control.max_iterations must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn reference_spec(&self) -> ReferenceSpec {
        ReferenceSpec {
            kind: self.reference.kind.clone(),
            horizon: self.reference.t_sim + self.data.horizon,
        }
    }

    pub fn reference_signal(&self) -> Result<Vec<f64>> {
        reference(&self.reference_spec())
    }

    pub fn input_reference(&self) -> InputReference {
        match self.control.input_reference {
            InputReferenceMode::Zero => InputReference::Zero,
            InputReferenceMode::Equilibrium => {
                let p = &self.plant.params;
                InputReference::Sine {
                    amplitude: p.mass * p.length * p.gravity / 2.0,
                }
            }
        }
    }

    pub fn closed_loop_options(&self) -> ClosedLoopOptions {
        ClosedLoopOptions {
            t_sim: self.reference.t_sim,
            input_reference: self.input_reference(),
            preview: self.control.preview,
            noise_std: self.plant.noise_std,
            seed: self.seed,
        }
    }

    /// Network with freshly initialized weights for this architecture.
    pub fn initial_network(&self) -> Result<MlpNetwork> {
        let layout = self.layout()?;
        match self.network.architecture {
            Architecture::Linear => MlpNetwork::linear_identity(layout.dim(), layout.output_dim()),
            Architecture::Mlp => MlpNetwork::glorot(
                layout.dim(),
                &self.network.widths,
                &self.network.activations,
                layout.output_dim(),
                self.network.init_seed,
            ),
        }
    }
}

/// Runs the identification experiment: multisine torque into the pendulum from rest.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<TrajectoryData> {
    let u = multisine(&cfg.excitation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.excitation.seed);
    let y = record_trajectory(&cfg.plant.params, PlantState::default(), &u, cfg.plant.noise_std, &mut rng);
    TrajectoryData::from_siso(&u, &y)
}

/// Hankel matrices of a recorded trajectory, with the configured rest prefix.
pub fn hankel_from_data(cfg: &ExperimentConfig, data: &TrajectoryData) -> Result<HankelSet> {
    let data = if cfg.data.rest_prefix {
        data.with_rest_prefix(cfg.data.t_ini)
    } else {
        data.clone()
    };
    build_hankel(&data, cfg.data.t_ini, cfg.data.horizon)
}

/// Trains the configured network. The identity architecture has nothing to
/// train and returns an empty history.
pub fn train_network(cfg: &ExperimentConfig, hankel: &HankelSet) -> Result<TrainOutcome> {
    let net = cfg.initial_network()?;
    match cfg.network.architecture {
        Architecture::Linear => Ok(TrainOutcome { net, history: Vec::new() }),
        Architecture::Mlp => train_nls(&net, &hankel.h, &hankel.y_f, &cfg.training),
    }
}

/// Frozen online data for a trained network.
pub fn build_context(cfg: &ExperimentConfig, net: &MlpNetwork, hankel: &HankelSet) -> Result<Arc<DeepcContext>> {
    let linear = cfg.network.architecture == Architecture::Linear || cfg.control.formulation == ControlMode::Linear;
    let ctx = if linear {
        DeepcContext::linear(hankel, cfg.certify.sv_tol)?
    } else {
        DeepcContext::prepare(net, hankel, cfg.certify.sv_tol)?
    };
    Ok(Arc::new(ctx))
}

/// Scalar weights as 1x1 matrices, for callers that build a [`ControlConfig`] by hand.
pub fn scalar(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}
