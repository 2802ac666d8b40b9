//! Neural DeePC controllers.
//!
//! Three equivalent-in-the-limit formulations of the receding-horizon problem:
//!
//! * [`Formulation::P1`] optimizes `(y, u, g)` with `[Phi_bar; 1^T; Y_f] g = col(phi(u), 1, y)`
//!   and regularizes `|g - g_nls(u)|^2`.
//! * [`Formulation::P2`] writes `g = g_nls(u) + g_hat`, eliminates `y`, and keeps
//!   `[Phi_bar; 1^T] g_hat = 0`.
//! * [`Formulation::P3`] moves the auxiliary to output space, `y = y_nls(u) + g_tilde`,
//!   with the data constraint softened by a quadratic slack penalty.
//!   [`Formulation::P3NoSlack`] keeps it hard.
//!
//! The linear DeePC baseline is any of these on [`DeepcContext::linear`].

mod problems;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::HankelSet;
use crate::numerics::{solve_nlp, Matrix, NlpProblem, SqpOptions, SqpStatus, Vector};
use crate::predictors::DeepcContext;

use problems::{ProblemOne, ProblemThree, ProblemTwo, StepData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    P1,
    P2,
    P3,
    P3NoSlack,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [Formulation::P1, Formulation::P2, Formulation::P3, Formulation::P3NoSlack];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::P1 => "p1",
            Formulation::P2 => "p2",
            Formulation::P3 => "p3",
            Formulation::P3NoSlack => "p3-no-slack",
        }
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown formulation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    /// Shift the previous input plan by one step and repeat its last input.
    #[default]
    Shift,
    /// Always start from the clipped input reference.
    Cold,
}

#[derive(Debug, Clone)]
pub struct ControlConfig {
    /// Output weight, `p x p`, positive semidefinite.
    pub q: Matrix,
    /// Input weight, `m x m`, positive definite.
    pub r: Matrix,
    pub lambda: f64,
    /// Penalty on the data-constraint slack of [`Formulation::P3`].
    pub slack_penalty: f64,
    pub u_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
    pub formulation: Formulation,
    pub warm_start: WarmStart,
    pub solver: SqpOptions,
}

impl ControlConfig {
    /// Single-input single-output weights.
    pub fn siso(q: f64, r: f64, lambda: f64) -> Self {
        Self {
            q: Matrix::from_element(1, 1, q),
            r: Matrix::from_element(1, 1, r),
            lambda,
            slack_penalty: 1e4,
            u_bounds: (-4.0, 4.0),
            y_bounds: (-std::f64::consts::PI, std::f64::consts::PI),
            formulation: Formulation::P3,
            warm_start: WarmStart::Shift,
            solver: SqpOptions::default(),
        }
    }

    pub fn with_formulation(mut self, formulation: Formulation) -> Self {
        self.formulation = formulation;
        self
    }

    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.q.shape() != (p, p) || self.r.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "weights are {:?} and {:?}, expected {p}x{p} and {m}x{m}",
                self.q.shape(),
                self.r.shape()
            )));
        }
        let sym = |a: &Matrix| (a - a.transpose()).amax() <= 1e-12 * (1.0 + a.amax());
        if !sym(&self.q) || !sym(&self.r) {
            return Err(Error::Config("Q and R must be symmetric".into()));
        }
        if self.q.clone().symmetric_eigenvalues().min() < -1e-12 * (1.0 + self.q.amax()) {
            return Err(Error::Config("Q must be positive semidefinite".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("slack_penalty", self.slack_penalty)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, (lo, hi)) in [("input", self.u_bounds), ("output", self.y_bounds)] {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Config(format!("{name} box [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Past data and references for one solve.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// `u(k - T_ini) .. u(k - 1)`, stacked.
    pub u_ini: &'a [f64],
    /// `y(k - T_ini + 1) .. y(k)`, stacked.
    pub y_ini: &'a [f64],
    /// `y_ref(1|k) .. y_ref(N|k)`.
    pub y_ref: &'a [f64],
    /// `u_ref(0|k) .. u_ref(N-1|k)`.
    pub u_ref: &'a [f64],
}

/// Starting point. `aux` is the formulation's own auxiliary (`g`, `g_hat` or
/// `g_tilde`); when absent it is set to `g_nls(u)` for P1 and to zero otherwise.
#[derive(Debug, Clone)]
pub struct InitialGuess {
    pub u: Vector,
    pub aux: Option<Vector>,
}

#[derive(Debug, Clone)]
pub struct ControlStepResult {
    /// First input of the plan, the one applied to the plant.
    pub u_applied: Vec<f64>,
    pub u_plan: Vector,
    /// Predicted outputs `y(1..N)` at the optimum.
    pub y_pred: Vector,
    /// Point prediction `y_nls(u_plan)`.
    pub y_nls: Vector,
    pub aux: Vector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: SqpStatus,
    pub constraint_violation: f64,
    pub stationarity: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SlackData {
    /// `K' K` with `K = [Phi_bar; 1^T] Y_f^+`.
    pub ktk: Matrix,
    /// Orthonormal basis of the row space of `K`, `pN x r`.
    pub row_basis: Matrix,
}

/// Controller data that does not change between steps.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub ctx: Arc<DeepcContext>,
    pub cfg: ControlConfig,
    pub qbar: Matrix,
    pub rbar: Matrix,
    pub q2: Matrix,
    pub r2: Matrix,
    pub r2_inv: Matrix,
    /// `2 Q_bar`, nudged to be invertible.
    pub q2_reg: Matrix,
    pub q2_reg_inv: Matrix,
    pub p_phi: Matrix,
    pub p1: Vector,
    pub w_phi: Matrix,
    pub w1: Vector,
    pub p3: SlackData,
}

fn block_diag(block: &Matrix, copies: usize) -> Matrix {
    let (r, c) = block.shape();
    let mut out = Matrix::zeros(r * copies, c * copies);
    for i in 0..copies {
        out.view_mut((i * r, i * c), (r, c)).copy_from(block);
    }
    out
}

fn slack_data(ctx: &DeepcContext, need: bool) -> Result<SlackData> {
    let ny = ctx.layout.output_dim();
    let Some(pinv) = ctx.y_f_pinv.as_ref() else {
        if need {
            return Err(Error::Precondition(format!(
                "output-space formulation needs Y_f with full row rank; smallest singular value is {:.3e}",
                ctx.y_f_min_singular_value
            )));
        }
        return Ok(SlackData {
            ktk: Matrix::zeros(ny, ny),
            row_basis: Matrix::zeros(ny, 0),
        });
    };
    let k = &ctx.augmented * pinv;
    let svd = k.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD of the slack map failed".into()))?;
    let sv = &svd.singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    let r = sv.iter().filter(|&&s| s > ctx.sv_tol * top.max(f64::MIN_POSITIVE)).count();
    Ok(SlackData {
        ktk: k.tr_mul(&k),
        row_basis: v_t.rows(0, r).transpose(),
    })
}

impl Prepared {
    fn new(ctx: Arc<DeepcContext>, cfg: ControlConfig) -> Result<Self> {
        let layout = ctx.layout;
        cfg.validate(layout.m, layout.p)?;
        let n = layout.horizon;
        let qbar = block_diag(&cfg.q, n);
        let rbar = block_diag(&cfg.r, n);
        let q2 = &qbar * 2.0;
        let r2 = &rbar * 2.0;
        let r2_inv = r2
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("R must be positive definite".into()))?
            .inverse();
        let ny = qbar.nrows();
        let q2_reg = &q2 + Matrix::identity(ny, ny) * (1e-8 * (1.0 + q2.amax()));
        let q2_reg_inv = q2_reg
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("Q must be positive semidefinite".into()))?
            .inverse();
        let l = ctx.basis_width();
        let p_phi = ctx.pinv_aug.columns(0, l).clone_owned();
        let p1 = ctx.pinv_aug.column(l).clone_owned();
        let w_phi = ctx.output_map.columns(0, l).clone_owned();
        let w1 = ctx.output_map.column(l).clone_owned();
        let need = matches!(cfg.formulation, Formulation::P3 | Formulation::P3NoSlack);
        let p3 = slack_data(&ctx, need)?;
        Ok(Self {
            ctx,
            cfg,
            qbar,
            rbar,
            q2,
            r2,
            r2_inv,
            q2_reg,
            q2_reg_inv,
            p_phi,
            p1,
            w_phi,
            w1,
            p3,
        })
    }
}

/// Receding-horizon Neural DeePC controller.
#[derive(Debug, Clone)]
pub struct NeuralDeepc {
    prep: Prepared,
    previous: Option<Vector>,
}

impl NeuralDeepc {
    pub fn new(ctx: Arc<DeepcContext>, cfg: ControlConfig) -> Result<Self> {
        Ok(Self {
            prep: Prepared::new(ctx, cfg)?,
            previous: None,
        })
    }

    /// Linear DeePC on the same data: the hidden map is the identity.
    pub fn linear(hankel: &HankelSet, cfg: ControlConfig, sv_tol: f64) -> Result<Self> {
        Self::new(Arc::new(DeepcContext::linear(hankel, sv_tol)?), cfg)
    }

    pub fn config(&self) -> &ControlConfig {
        &self.prep.cfg
    }

    pub fn context(&self) -> &DeepcContext {
        &self.prep.ctx
    }

    /// Forgets the warm-start plan.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    fn check_input(&self, input: &StepInput<'_>) -> Result<()> {
        let l = self.prep.ctx.layout;
        let expect = [
            ("u_ini", input.u_ini.len(), l.m * l.t_ini),
            ("y_ini", input.y_ini.len(), l.p * l.t_ini),
            ("y_ref", input.y_ref.len(), l.p * l.horizon),
            ("u_ref", input.u_ref.len(), l.m * l.horizon),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Dimension(format!("{name} has length {got}, expected {want}")));
            }
        }
        Ok(())
    }

    fn clip_u(&self, u: &mut Vector) {
        let (lo, hi) = self.prep.cfg.u_bounds;
        u.apply(|v| *v = v.clamp(lo, hi));
    }

    /// Guess used by [`NeuralDeepc::solve`]: the shifted previous plan, or the
    /// clipped input reference on the first step or under [`WarmStart::Cold`].
    pub fn initial_guess(&self, input: &StepInput<'_>) -> InitialGuess {
        let m = self.prep.ctx.layout.m;
        let mut u = match (&self.previous, self.prep.cfg.warm_start) {
            (Some(prev), WarmStart::Shift) => {
                let n = prev.len();
                let mut u = Vector::zeros(n);
                u.rows_mut(0, n - m).copy_from(&prev.rows(m, n - m));
                u.rows_mut(n - m, m).copy_from(&prev.rows(n - m, m));
                u
            }
            _ => Vector::from_column_slice(input.u_ref),
        };
        self.clip_u(&mut u);
        InitialGuess { u, aux: None }
    }

    /// Solves one step from the warm-start guess and records the plan.
    pub fn solve(&mut self, input: &StepInput<'_>) -> Result<ControlStepResult> {
        let guess = self.initial_guess(input);
        let res = self.solve_from(input, &guess)?;
        self.previous = Some(res.u_plan.clone());
        Ok(res)
    }

    /// Solves one step from an explicit guess without touching the warm-start state.
    pub fn solve_from(&self, input: &StepInput<'_>, guess: &InitialGuess) -> Result<ControlStepResult> {
        self.solve_inner(input, guess, self.prep.cfg.formulation, false)
    }

    /// The same step with the auxiliary pinned to zero, i.e. MPC on the point
    /// predictor `y_nls(u)` alone.
    pub fn solve_point_predictor(&self, input: &StepInput<'_>, u0: &Vector) -> Result<ControlStepResult> {
        let guess = InitialGuess { u: u0.clone(), aux: None };
        self.solve_inner(input, &guess, Formulation::P2, true)
    }

    fn solve_inner(
        &self,
        input: &StepInput<'_>,
        guess: &InitialGuess,
        formulation: Formulation,
        fix_aux: bool,
    ) -> Result<ControlStepResult> {
        self.check_input(input)?;
        let prep = &self.prep;
        let ctx = &prep.ctx;
        let (m, nu, ny, t) = (ctx.layout.m, ctx.layout.m * ctx.layout.horizon, ctx.layout.output_dim(), ctx.columns());
        if guess.u.len() != nu {
            return Err(Error::Dimension(format!("initial input plan has length {}, expected {nu}", guess.u.len())));
        }
        let mut u0 = guess.u.clone();
        self.clip_u(&mut u0);
        let data = StepData {
            prep,
            u_ini: input.u_ini,
            y_ini: input.y_ini,
            y_ref: Vector::from_column_slice(input.y_ref),
            u_ref: Vector::from_column_slice(input.u_ref),
        };
        let (phi0, _) = data.hidden(u0.as_slice());
        let g_nls0 = &prep.p1 + &prep.p_phi * &phi0;
        let aux_len = match formulation {
            Formulation::P1 | Formulation::P2 => t,
            Formulation::P3 | Formulation::P3NoSlack => ny,
        };
        let aux0 = match &guess.aux {
            Some(a) if a.len() != aux_len => {
                return Err(Error::Dimension(format!("auxiliary guess has length {}, expected {aux_len}", a.len())));
            }
            Some(a) => a.clone(),
            None if formulation == Formulation::P1 => g_nls0,
            None => Vector::zeros(aux_len),
        };

        let stack = |head: &Vector, tail: &Vector| {
            let mut x = Vector::zeros(head.len() + tail.len());
            x.rows_mut(0, head.len()).copy_from(head);
            x.rows_mut(head.len(), tail.len()).copy_from(tail);
            x
        };

        let (sol, u_plan, y_pred, aux) = match formulation {
            Formulation::P1 => {
                let problem = ProblemOne { data };
                let (ylo, yhi) = prep.cfg.y_bounds;
                let y0 = (&ctx.y_f * &aux0).map(|v| v.clamp(ylo, yhi));
                let x0 = stack(&stack(&y0, &u0), &aux0);
                let sol = solve_nlp(&problem as &dyn NlpProblem, &x0, &prep.cfg.solver)?;
                let y = sol.x.rows(0, ny).clone_owned();
                let u = sol.x.rows(ny, nu).clone_owned();
                let g = sol.x.rows(ny + nu, t).clone_owned();
                (sol, u, y, g)
            }
            Formulation::P2 => {
                let problem = ProblemTwo { data, fix_aux };
                let aux0 = if fix_aux { Vector::zeros(t) } else { aux0 };
                let sol = solve_nlp(&problem as &dyn NlpProblem, &stack(&u0, &aux0), &prep.cfg.solver)?;
                let y = problem.outputs(&sol.x);
                (sol.clone(), sol.x.rows(0, nu).clone_owned(), y, sol.x.rows(nu, t).clone_owned())
            }
            Formulation::P3 | Formulation::P3NoSlack => {
                let problem = ProblemThree {
                    data,
                    slack: formulation == Formulation::P3,
                };
                let sol = solve_nlp(&problem as &dyn NlpProblem, &stack(&u0, &aux0), &prep.cfg.solver)?;
                let y = problem.outputs(&sol.x);
                (sol.clone(), sol.x.rows(0, nu).clone_owned(), y, sol.x.rows(nu, ny).clone_owned())
            }
        };

        let reg = ctx.regressor(input.u_ini, input.y_ini, u_plan.as_slice())?;
        let y_nls = ctx.nls_predict(&reg)?;
        Ok(ControlStepResult {
            u_applied: u_plan.as_slice()[..m].to_vec(),
            u_plan,
            y_pred,
            y_nls,
            aux,
            objective: sol.objective,
            iterations: sol.iterations,
            converged: sol.converged,
            status: sol.status,
            constraint_violation: sol.constraint_violation,
            stationarity: sol.stationarity,
            solve_seconds: sol.solve_seconds,
        })
    }
}
