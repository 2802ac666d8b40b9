//! Multilayer perceptron with a linear output layer, its hidden-layer map, Adam
//! training of the Frobenius fit cost, and the least-squares output-layer refit.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pseudo_inverse, singular_values, Matrix, Vector, DEFAULT_SV_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, a: &mut Matrix) {
        if self == Activation::Tanh {
            a.apply(|v| *v = v.tanh());
        }
    }

    /// Derivative expressed through the activation output `z`.
    fn derivative_from_output(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - z * z,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn affine(&self, x: &Matrix) -> Matrix {
        let mut a = &self.weights * x;
        for mut col in a.column_iter_mut() {
            col += &self.bias;
        }
        a
    }
}

/// Affine maps applied around training and folded into the first and output layers
/// afterwards. Kept for reference only; the network itself works in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    pub hidden: Vec<DenseLayer>,
    /// Always linear.
    pub output: DenseLayer,
    pub normalization: Option<Normalization>,
}

impl MlpNetwork {
    pub fn new(hidden: Vec<DenseLayer>, output: DenseLayer) -> Result<Self> {
        let net = Self {
            hidden,
            output,
            normalization: None,
        };
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Dimension("network needs at least one hidden layer".into()));
        }
        let mut prev = self.hidden[0].inputs();
        for (i, l) in self.hidden.iter().chain(std::iter::once(&self.output)).enumerate() {
            if l.inputs() != prev || l.bias.len() != l.outputs() || l.outputs() == 0 {
                return Err(Error::Dimension(format!(
                    "layer {i} is {}x{} with bias {}, expected {prev} inputs",
                    l.outputs(),
                    l.inputs(),
                    l.bias.len()
                )));
            }
            prev = l.outputs();
        }
        if self.output.activation != Activation::Linear {
            return Err(Error::Dimension("output layer must be linear".into()));
        }
        let finite = self
            .layers()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numerical("network parameters must be finite".into()));
        }
        Ok(())
    }

    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn glorot(
        input_dim: usize,
        widths: &[usize],
        activations: &[Activation],
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() || widths.len() != activations.len() || widths.contains(&0) {
            return Err(Error::Config(format!(
                "hidden widths {widths:?} and activations {activations:?} must be nonempty, positive and of equal length"
            )));
        }
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config("network input and output dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize, act: Activation| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            DenseLayer {
                weights: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-lim..lim)),
                bias: Vector::zeros(fan_out),
                activation: act,
            }
        };
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (&w, &a) in widths.iter().zip(activations) {
            hidden.push(layer(prev, w, a));
            prev = w;
        }
        let output = layer(prev, output_dim, Activation::Linear);
        Self::new(hidden, output)
    }

    /// One linear hidden layer wired as the identity, so the hidden map returns its
    /// input. The output layer starts at zero; refit it from data.
    pub fn linear_identity(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(
            vec![DenseLayer {
                weights: Matrix::identity(input_dim, input_dim),
                bias: Vector::zeros(input_dim),
                activation: Activation::Linear,
            }],
            DenseLayer {
                weights: Matrix::zeros(output_dim, input_dim),
                bias: Vector::zeros(output_dim),
                activation: Activation::Linear,
            },
        )
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.output.outputs()
    }

    /// Width `L` of the last hidden layer.
    pub fn hidden_width(&self) -> usize {
        self.output.inputs()
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.output))
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network input has {rows} rows, expected {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Last-hidden activations for each column of `x`.
    pub fn hidden_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.nrows())?;
        let mut z = x.clone();
        for l in &self.hidden {
            let mut a = l.affine(&z);
            l.activation.apply(&mut a);
            z = a;
        }
        Ok(z)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.output.affine(&self.hidden_batch(x)?))
    }

    /// Returns the network output and the last-hidden activation.
    pub fn forward(&self, u_nn: &Vector) -> Result<(Vector, Vector)> {
        let x = Matrix::from_column_slice(u_nn.len(), 1, u_nn.as_slice());
        let z = self.hidden_batch(&x)?.column(0).clone_owned();
        let y = &self.output.weights * &z + &self.output.bias;
        Ok((y, z))
    }

    pub fn hidden(&self, u_nn: &Vector) -> Result<Vector> {
        Ok(self.forward(u_nn)?.1)
    }

    /// Last-hidden activation and its Jacobian with respect to the input.
    pub fn hidden_with_jacobian(&self, u_nn: &Vector) -> Result<(Vector, Matrix)> {
        self.check_input(u_nn.len())?;
        let mut z = u_nn.clone();
        let mut jac = Matrix::identity(u_nn.len(), u_nn.len());
        for l in &self.hidden {
            let mut a = &l.weights * &z + &l.bias;
            let mut j = &l.weights * &jac;
            if l.activation == Activation::Tanh {
                a.apply(|v| *v = v.tanh());
                for (i, mut row) in j.row_iter_mut().enumerate() {
                    row *= l.activation.derivative_from_output(a[i]);
                }
            }
            z = a;
            jac = j;
        }
        Ok((z, jac))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters layer by layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            for r in 0..l.outputs() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} parameters supplied, network has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for l in self.layers_mut() {
            let (rows, cols) = l.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weights[(r, c)] = theta[k];
                    k += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = theta[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// `||Y - Phi_NN(X)||_F^2` and its gradient in [`params`](Self::params) order.
    pub fn loss_and_gradient(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Vec<f64>)> {
        self.check_input(x.nrows())?;
        if y.nrows() != self.output_dim() || y.ncols() != x.ncols() {
            return Err(Error::Dimension(format!(
                "targets are {}x{}, expected {}x{}",
                y.nrows(),
                y.ncols(),
                self.output_dim(),
                x.ncols()
            )));
        }
        // activations[0] = X, activations[i] = output of hidden layer i
        let mut acts = Vec::with_capacity(self.hidden.len() + 1);
        acts.push(x.clone());
        for l in &self.hidden {
            let mut a = l.affine(acts.last().expect("nonempty"));
            l.activation.apply(&mut a);
            acts.push(a);
        }
        let resid = self.output.affine(acts.last().expect("nonempty")) - y;
        let loss = resid.norm_squared();

        let mut grads: Vec<(Matrix, Vector)> = Vec::with_capacity(self.hidden.len() + 1);
        let mut delta = resid * 2.0;
        let layers: Vec<&DenseLayer> = self.layers().collect();
        for i in (0..layers.len()).rev() {
            let l = layers[i];
            let input = &acts[i];
            let gw = &delta * input.transpose();
            let gb = delta.column_sum();
            if i > 0 {
                let mut back = l.weights.transpose() * &delta;
                let prev_act = layers[i - 1].activation;
                if prev_act == Activation::Tanh {
                    back.zip_apply(input, |d, z| *d *= prev_act.derivative_from_output(z));
                }
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in &grads {
            for r in 0..gw.nrows() {
                flat.extend(gw.row(r).iter());
            }
            flat.extend(gb.iter());
        }
        Ok((loss, flat))
    }

    /// Frobenius fit cost `||Y - Phi_NN(X)||_F^2`.
    pub fn fit_cost(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        Ok((self.forward_batch(x)? - y).norm_squared())
    }

    fn fold_normalization(&mut self, n: &Normalization) {
        let first = &mut self.hidden[0];
        // W (x - mu)/s + b  ->  (W diag(1/s)) x + (b - W diag(1/s) mu)
        for (c, &s) in n.input_scale.iter().enumerate() {
            first.weights.column_mut(c).unscale_mut(s);
        }
        let mu = Vector::from_column_slice(&n.input_mean);
        first.bias -= &first.weights * mu;
        self.output.weights *= n.output_scale;
        self.output.bias *= n.output_scale;
        self.output.bias += Vector::from_column_slice(&n.output_mean);
    }

    fn unfold_normalization(&mut self, n: &Normalization) {
        let mu = Vector::from_column_slice(&n.input_mean);
        let first = &mut self.hidden[0];
        first.bias += &first.weights * mu;
        for (c, &s) in n.input_scale.iter().enumerate() {
            first.weights.column_mut(c).scale_mut(s);
        }
        self.output.bias -= Vector::from_column_slice(&n.output_mean);
        self.output.weights.unscale_mut(n.output_scale);
        self.output.bias.unscale_mut(n.output_scale);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `None` selects full batch for up to 2000 columns and 256 otherwise.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Loss is recorded every `report_every` epochs and after the last one.
    pub report_every: usize,
    pub normalize: bool,
    /// Training stops once the recorded raw loss is at or below this value.
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: None,
            epochs: 5000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            report_every: 1,
            normalize: true,
            target_loss: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.target_loss >= 0.0
            && self.report_every >= 1
            && self.batch_size != Some(0);
        if !ok {
            return Err(Error::Config(format!("invalid training configuration: {self:?}")));
        }
        Ok(())
    }

    fn batch_for(&self, columns: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(columns),
            None if columns <= 2000 => columns,
            None => 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: MlpNetwork,
    /// Frobenius fit cost in raw units; epoch 0 is the initial network.
    pub history: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,loss")?;
        for r in &self.history {
            writeln!(w, "{},{}", r.epoch, r.loss)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normalization_for(x: &Matrix, y: &Matrix) -> Normalization {
    let t = x.ncols() as f64;
    let mut input_mean = Vec::with_capacity(x.nrows());
    let mut input_scale = Vec::with_capacity(x.nrows());
    for r in x.row_iter() {
        let mean = r.sum() / t;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
        input_mean.push(mean);
        input_scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    let output_mean: Vec<f64> = y.row_iter().map(|r| r.sum() / t).collect();
    let mut ss = 0.0;
    for (i, r) in y.row_iter().enumerate() {
        ss += r.iter().map(|v| (v - output_mean[i]).powi(2)).sum::<f64>();
    }
    let sd = (ss / (y.len() as f64)).sqrt();
    Normalization {
        input_mean,
        input_scale,
        output_mean,
        output_scale: if sd > 0.0 { sd } else { 1.0 },
    }
}

fn normalize_data(n: &Normalization, x: &Matrix, y: &Matrix) -> (Matrix, Matrix) {
    let xn = Matrix::from_fn(x.nrows(), x.ncols(), |r, c| {
        (x[(r, c)] - n.input_mean[r]) / n.input_scale[r]
    });
    let yn = Matrix::from_fn(y.nrows(), y.ncols(), |r, c| {
        (y[(r, c)] - n.output_mean[r]) / n.output_scale
    });
    (xn, yn)
}

fn select_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Minimizes `||Y - Phi_NN(X)||_F^2` over all weights and biases with Adam.
pub fn train_nls(net: &MlpNetwork, x: &Matrix, y: &Matrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.ncols() == 0 {
        return Err(Error::Dimension("training data has no columns".into()));
    }
    let initial_loss = net.loss_and_gradient(x, y)?.0;
    let mut history = vec![LossRecord {
        epoch: 0,
        loss: initial_loss,
    }];
    if !initial_loss.is_finite() {
        return Err(Error::Training {
            epoch: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    if initial_loss <= cfg.target_loss {
        return Ok(TrainOutcome {
            net: net.clone(),
            history,
        });
    }

    let norm = cfg.normalize.then(|| normalization_for(x, y));
    let mut work = net.clone();
    let (xn, yn) = match &norm {
        Some(n) => {
            work.unfold_normalization(n);
            normalize_data(n, x, y)
        }
        None => (x.clone(), y.clone()),
    };
    let loss_scale = norm.as_ref().map_or(1.0, |n| n.output_scale * n.output_scale);

    let cols = x.ncols();
    let batch = cfg.batch_for(cols);
    let full_batch = batch == cols;
    let mut order: Vec<usize> = (0..cols).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut theta = work.params();
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    let mut step = 0i32;

    for epoch in 1..=cfg.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (loss, grad) = if full_batch {
                work.loss_and_gradient(&xn, &yn)?
            } else {
                work.loss_and_gradient(&select_columns(&xn, chunk), &select_columns(&yn, chunk))?
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: "loss or gradient became non-finite".into(),
                });
            }
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            for i in 0..theta.len() {
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * grad[i];
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                theta[i] -= cfg.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + cfg.epsilon);
            }
            work.set_params(&theta)?;
        }
        if epoch % cfg.report_every == 0 || epoch == cfg.epochs {
            let loss = work.fit_cost(&xn, &yn)? * loss_scale;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "loss became non-finite".into(),
                });
            }
            history.push(LossRecord { epoch, loss });
            if loss <= cfg.target_loss {
                break;
            }
        }
    }

    if let Some(n) = &norm {
        work.fold_normalization(n);
        work.normalization = Some(n.clone());
    }
    work.check().map_err(|e| Error::Training {
        epoch: cfg.epochs,
        reason: e.to_string(),
    })?;
    Ok(TrainOutcome { net: work, history })
}

/// Hidden-layer outputs over the regressor columns, plus the augmented matrix
/// `[Phi_bar; 1^T]` and its conditioning.
#[derive(Debug, Clone)]
pub struct NeuralDataMatrix {
    pub phi_bar: Matrix,
    pub augmented: Matrix,
    pub min_singular_value: f64,
    pub full_row_rank: bool,
}

pub fn augment(phi_bar: &Matrix) -> Matrix {
    let (l, t) = phi_bar.shape();
    let mut aug = Matrix::from_element(l + 1, t, 1.0);
    aug.rows_mut(0, l).copy_from(phi_bar);
    aug
}

pub fn neural_data_matrix(net: &MlpNetwork, h: &Matrix) -> Result<NeuralDataMatrix> {
    let phi_bar = net.hidden_batch(h)?;
    let augmented = augment(&phi_bar);
    let sv = singular_values(&augmented)?;
    let smax = sv[0];
    let rows = augmented.nrows();
    let min_singular_value = if rows <= sv.len() { sv[rows - 1] } else { 0.0 };
    let full_row_rank = rows <= augmented.ncols() && min_singular_value > DEFAULT_SV_TOL * smax;
    Ok(NeuralDataMatrix {
        phi_bar,
        augmented,
        min_singular_value,
        full_row_rank,
    })
}

#[derive(Debug, Clone)]
pub struct RefitReport {
    pub w_o: Matrix,
    pub b_o: Vector,
    pub cost_before: f64,
    pub cost_after: f64,
}

/// Replaces the output layer by `[W_o b_o] = Y_f [Phi_bar; 1^T]^+`.
pub fn refit_output_layer(net: &mut MlpNetwork, ndm: &NeuralDataMatrix, y_f: &Matrix) -> Result<RefitReport> {
    let l = net.hidden_width();
    if ndm.phi_bar.nrows() != l || y_f.nrows() != net.output_dim() || y_f.ncols() != ndm.phi_bar.ncols() {
        return Err(Error::Dimension(format!(
            "refit: hidden data {}x{}, targets {}x{}, network width {l} output {}",
            ndm.phi_bar.nrows(),
            ndm.phi_bar.ncols(),
            y_f.nrows(),
            y_f.ncols(),
            net.output_dim()
        )));
    }
    let cost_of = |net: &MlpNetwork| {
        (net.output.affine(&ndm.phi_bar) - y_f).norm_squared()
    };
    let cost_before = cost_of(net);
    let wb = y_f * pseudo_inverse(&ndm.augmented, DEFAULT_SV_TOL)?;
    let w_o = wb.columns(0, l).clone_owned();
    let b_o = wb.column(l).clone_owned();
    net.output.weights = w_o.clone();
    net.output.bias = b_o.clone();
    let cost_after = cost_of(net);
    Ok(RefitReport {
        w_o,
        b_o,
        cost_before,
        cost_after,
    })
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    version: u32,
    hidden: Vec<LayerFile>,
    output: LayerFile,
    #[serde(default)]
    normalization: Option<Normalization>,
}

const WEIGHTS_FORMAT: &str = "neural-deepc-mlp";
const WEIGHTS_VERSION: u32 = 1;

fn layer_to_file(l: &DenseLayer) -> LayerFile {
    let mut weights = Vec::with_capacity(l.weights.len());
    for r in 0..l.outputs() {
        weights.extend(l.weights.row(r).iter());
    }
    LayerFile {
        rows: l.outputs(),
        cols: l.inputs(),
        activation: l.activation,
        weights,
        bias: l.bias.iter().copied().collect(),
    }
}

fn layer_from_file(f: LayerFile) -> Result<DenseLayer> {
    if f.weights.len() != f.rows * f.cols || f.bias.len() != f.rows {
        return Err(Error::Parse(format!(
            "layer declared {}x{} holds {} weights and {} biases",
            f.rows,
            f.cols,
            f.weights.len(),
            f.bias.len()
        )));
    }
    Ok(DenseLayer {
        weights: Matrix::from_row_slice(f.rows, f.cols, &f.weights),
        bias: Vector::from_vec(f.bias),
        activation: f.activation,
    })
}

impl MlpNetwork {
    pub fn to_json(&self) -> Result<String> {
        let file = NetworkFile {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            hidden: self.hidden.iter().map(layer_to_file).collect(),
            output: layer_to_file(&self.output),
            normalization: self.normalization.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        if file.format != WEIGHTS_FORMAT || file.version != WEIGHTS_VERSION {
            return Err(Error::Parse(format!(
                "unsupported weights file {} v{}",
                file.format, file.version
            )));
        }
        let hidden = file.hidden.into_iter().map(layer_from_file).collect::<Result<Vec<_>>>()?;
        let mut net = Self::new(hidden, layer_from_file(file.output)?).map_err(|e| Error::Parse(e.to_string()))?;
        net.normalization = file.normalization;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar_net(w1: f64, b1: f64, act: Activation, wo: f64, bo: f64) -> MlpNetwork {
        MlpNetwork::new(
            vec![DenseLayer {
                weights: Matrix::from_element(1, 1, w1),
                bias: Vector::from_element(1, b1),
                activation: act,
            }],
            DenseLayer {
                weights: Matrix::from_element(1, 1, wo),
                bias: Vector::from_element(1, bo),
                activation: Activation::Linear,
            },
        )
        .unwrap()
    }

    #[test]
    fn tanh_of_zero() {
        let net = MlpNetwork::new(
            vec![DenseLayer {
                weights: Matrix::identity(3, 3),
                bias: Vector::zeros(3),
                activation: Activation::Tanh,
            }],
            DenseLayer {
                weights: Matrix::identity(3, 3),
                bias: Vector::zeros(3),
                activation: Activation::Linear,
            },
        )
        .unwrap();
        let (y, z) = net.forward(&Vector::zeros(3)).unwrap();
        assert_eq!(y, Vector::zeros(3));
        assert_eq!(z, Vector::zeros(3));
    }

    #[test]
    fn identity_wiring_returns_input() {
        let net = MlpNetwork::linear_identity(4, 2).unwrap();
        let u = Vector::from_vec(vec![0.5, -1.0, 2.0, 3.5]);
        assert_eq!(net.hidden(&u).unwrap(), u);
    }

    #[test]
    fn scalar_tanh_network() {
        let net = scalar_net(2.0, 0.0, Activation::Tanh, 3.0, 1.0);
        let (y, _) = net.forward(&Vector::from_element(1, 0.5)).unwrap();
        assert_abs_diff_eq!(y[0], 3.284_782_467_9, epsilon = 1e-10);
        assert_abs_diff_eq!(y[0], 3.0 * 1f64.tanh() + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn wrong_input_dimension() {
        let net = scalar_net(1.0, 0.0, Activation::Tanh, 1.0, 0.0);
        assert!(matches!(net.forward(&Vector::zeros(2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn self_generated_targets_stay_at_zero_loss() {
        let net = MlpNetwork::glorot(3, &[5], &[Activation::Tanh], 2, 4).unwrap();
        let x = Matrix::from_fn(3, 40, |r, c| ((r * 40 + c) as f64 * 0.37).sin());
        let y = net.forward_batch(&x).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let out = train_nls(&net, &x, &y, &cfg).unwrap();
        assert!(out.final_loss() < 1e-10, "loss {}", out.final_loss());
        assert_eq!(out.net.params(), net.params());
    }

    #[test]
    fn linear_net_learns_gain() {
        let net = scalar_net(0.5, 0.0, Activation::Linear, 0.5, 0.0);
        let u: Vec<f64> = (0..50).map(|k| -1.0 + 2.0 * k as f64 / 49.0).collect();
        let x = Matrix::from_row_slice(1, u.len(), &u);
        let y = &x * 2.0;
        let cfg = TrainConfig {
            epochs: 3000,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let out = train_nls(&net, &x, &y, &cfg).unwrap();
        let gain = out.net.output.weights[(0, 0)] * out.net.hidden[0].weights[(0, 0)];
        // closed-form least squares gain through the origin
        let ls = u.iter().map(|v| 2.0 * v * v).sum::<f64>() / u.iter().map(|v| v * v).sum::<f64>();
        assert_abs_diff_eq!(gain, ls, epsilon = 1e-3);
    }

    #[test]
    fn training_is_deterministic() {
        let net = MlpNetwork::glorot(2, &[4], &[Activation::Tanh], 1, 9).unwrap();
        let x = Matrix::from_fn(2, 30, |r, c| ((r + 2 * c) as f64).cos());
        let y = Matrix::from_fn(1, 30, |_, c| (c as f64 * 0.2).sin());
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: Some(7),
            ..TrainConfig::default()
        };
        let a = train_nls(&net, &x, &y, &cfg).unwrap();
        let b = train_nls(&net, &x, &y, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert!(a.final_loss() < a.history[0].loss);
    }

    #[test]
    fn divergence_reports_epoch() {
        let net = scalar_net(1.0, 0.0, Activation::Linear, 1.0, 0.0);
        let x = Matrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let y = Matrix::from_row_slice(1, 2, &[1e200, -1e200]);
        let cfg = TrainConfig {
            epochs: 5,
            normalize: false,
            ..TrainConfig::default()
        };
        assert!(matches!(train_nls(&net, &x, &y, &cfg), Err(Error::Training { .. })));
    }

    #[test]
    fn normalization_folds_exactly() {
        let mut net = MlpNetwork::glorot(3, &[4, 2], &[Activation::Tanh, Activation::Tanh], 2, 1).unwrap();
        let x = Matrix::from_fn(3, 10, |r, c| (r as f64 + 1.0) * (c as f64) - 3.0);
        let y = Matrix::from_fn(2, 10, |r, c| 10.0 * r as f64 + c as f64);
        let n = normalization_for(&x, &y);
        let before = net.forward_batch(&x).unwrap();
        net.unfold_normalization(&n);
        net.fold_normalization(&n);
        assert_abs_diff_eq!(net.forward_batch(&x).unwrap(), before, epsilon = 1e-12);
    }

    #[test]
    fn refit_on_exact_affine_data() {
        let mut net = MlpNetwork::glorot(3, &[4], &[Activation::Tanh], 2, 3).unwrap();
        let x = Matrix::from_fn(3, 12, |r, c| ((r * 12 + c) as f64 * 0.71).sin());
        let y = net.forward_batch(&x).unwrap();
        let before = net.output.clone();
        let ndm = neural_data_matrix(&net, &x).unwrap();
        let rep = refit_output_layer(&mut net, &ndm, &y).unwrap();
        assert!(rep.cost_after < 1e-20);
        assert_abs_diff_eq!(net.output.weights, before.weights, epsilon = 1e-9);
        assert_abs_diff_eq!(net.output.bias, before.bias, epsilon = 1e-9);
    }

    #[test]
    fn refit_interpolates_square_case() {
        // 2 hidden units + ones row over 3 columns: augmented matrix is square
        let mut net = MlpNetwork::glorot(2, &[2], &[Activation::Tanh], 2, 5).unwrap();
        let x = Matrix::from_row_slice(2, 3, &[0.1, -0.7, 0.4, 0.9, 0.2, -0.5]);
        let y = Matrix::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.25, -4.0]);
        let ndm = neural_data_matrix(&net, &x).unwrap();
        assert!(ndm.full_row_rank);
        let rep = refit_output_layer(&mut net, &ndm, &y).unwrap();
        assert!(rep.cost_after < 1e-20, "{}", rep.cost_after);
    }

    #[test]
    fn neural_data_matrix_of_identity_wiring_is_input() {
        let net = MlpNetwork::linear_identity(2, 1).unwrap();
        let h = Matrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 5.0, 0.0, 1.0, 0.0, 2.0]);
        let ndm = neural_data_matrix(&net, &h).unwrap();
        assert_eq!(ndm.phi_bar, h);
        assert_eq!(ndm.augmented.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0; 4]);
        assert!(ndm.full_row_rank && ndm.min_singular_value > 0.0);
    }

    #[test]
    fn single_column_data_matrix() {
        let net = MlpNetwork::glorot(2, &[3], &[Activation::Tanh], 1, 2).unwrap();
        let h = Matrix::from_column_slice(2, 1, &[0.3, -0.2]);
        let ndm = neural_data_matrix(&net, &h).unwrap();
        assert_eq!(ndm.phi_bar.shape(), (3, 1));
        assert_eq!(ndm.phi_bar.column(0).clone_owned(), net.hidden(&Vector::from_column_slice(&[0.3, -0.2])).unwrap());
        assert!(!ndm.full_row_rank);
    }

    #[test]
    fn weights_json_round_trip() {
        let mut net = MlpNetwork::glorot(4, &[3, 2], &[Activation::Tanh, Activation::Linear], 2, 8).unwrap();
        net.normalization = Some(Normalization {
            input_mean: vec![0.0; 4],
            input_scale: vec![1.0; 4],
            output_mean: vec![0.5, 0.0],
            output_scale: 2.0,
        });
        let back = MlpNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        assert!(MlpNetwork::from_json("{\"format\":\"x\"}").is_err());
    }

    fn fd_gradient(net: &MlpNetwork, x: &Matrix, y: &Matrix) -> Vec<f64> {
        let theta = net.params();
        let mut probe = net.clone();
        (0..theta.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + theta[i].abs());
                let mut t = theta.clone();
                t[i] += h;
                probe.set_params(&t).unwrap();
                let fp = probe.fit_cost(x, y).unwrap();
                t[i] -= 2.0 * h;
                probe.set_params(&t).unwrap();
                let fm = probe.fit_cost(x, y).unwrap();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn affine_output_identity(seed in 0u64..1000, u in prop::collection::vec(-3.0f64..3.0, 4)) {
            let net = MlpNetwork::glorot(4, &[6, 5], &[Activation::Tanh, Activation::Tanh], 3, seed).unwrap();
            let (y, z) = net.forward(&Vector::from_vec(u)).unwrap();
            let direct = &net.output.weights * &z + &net.output.bias;
            prop_assert!((y - direct).amax() < 1e-14);
        }

        #[test]
        fn backprop_matches_finite_differences(
            seed in 0u64..10_000,
            widths in prop::collection::vec(1usize..6, 1..3),
            linear_first in any::<bool>(),
        ) {
            let mut acts = vec![Activation::Tanh; widths.len()];
            if linear_first {
                acts[0] = Activation::Linear;
            }
            let net = MlpNetwork::glorot(3, &widths, &acts, 2, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Matrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
            let y = Matrix::from_fn(2, 7, |_, _| rng.random_range(-1.0..1.0));
            let (_, g) = net.loss_and_gradient(&x, &y).unwrap();
            let fd = fd_gradient(&net, &x, &y);
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            prop_assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
        }

        #[test]
        fn hidden_jacobian_matches_finite_differences(seed in 0u64..1000) {
            let net = MlpNetwork::glorot(3, &[4, 3], &[Activation::Tanh, Activation::Tanh], 1, seed).unwrap();
            let u = Vector::from_vec(vec![0.3, -0.4, 0.8]);
            let (_, jac) = net.hidden_with_jacobian(&u).unwrap();
            for c in 0..3 {
                let mut up = u.clone();
                up[c] += 1e-6;
                let mut dn = u.clone();
                dn[c] -= 1e-6;
                let col = (net.hidden(&up).unwrap() - net.hidden(&dn).unwrap()) / 2e-6;
                prop_assert!((col - jac.column(c)).amax() < 1e-8);
            }
        }

        #[test]
        fn refit_never_increases_cost(seed in 0u64..1000) {
            let mut net = MlpNetwork::glorot(3, &[5], &[Activation::Tanh], 2, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(3, 25, |_, _| rng.random_range(-2.0..2.0));
            let y = Matrix::from_fn(2, 25, |_, _| rng.random_range(-2.0..2.0));
            let ndm = neural_data_matrix(&net, &x).unwrap();
            let rep = refit_output_layer(&mut net, &ndm, &y).unwrap();
            prop_assert!(rep.cost_after <= rep.cost_before);
        }
    }
}
