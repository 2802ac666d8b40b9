//! Sequential quadratic programming for small dense NLPs.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    f(x)
//!     subject to  c(x) = 0
//!                 lo <= h(x) <= hi
//!                 xl <= x <= xu
//! ```
//!
//! Each iteration solves a convex QP built from a damped (Powell) BFGS approximation
//! of the Lagrangian Hessian, then takes an Armijo step on the l1 merit function,
//! with a second-order correction when the full step is rejected. Iterates never
//! leave the box.

use std::time::Instant;

use super::linalg::{Matrix, Vector};
use super::qp::{self, InequalityRow, QpData, QpSolution, RowKind};
use crate::error::{Error, Result};

/// Function values at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    /// Equality residuals `c(x)`.
    pub eq: Vector,
    /// General inequality function values `h(x)`.
    pub ineq: Vector,
}

/// First derivatives at a point.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub gradient: Vector,
    pub eq_jacobian: Matrix,
    pub ineq_jacobian: Matrix,
}

/// Starting Hessian approximation for the BFGS recursion.
#[derive(Debug, Clone)]
pub enum HessianInit {
    /// Identity, rescaled after the first accepted step.
    Identity,
    /// A positive definite approximation together with its inverse.
    Dense { hessian: Matrix, inverse: Matrix },
}

impl HessianInit {
    /// Builds a dense initialization, inverting `hessian` by Cholesky.
    pub fn from_hessian(hessian: Matrix) -> Result<Self> {
        let inverse = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("initial Hessian is not positive definite".into()))?
            .inverse();
        Ok(HessianInit::Dense { hessian, inverse })
    }
}

/// A smooth nonlinear program.
///
/// Gradients and Jacobians are supplied analytically by the implementor.
pub trait NlpProblem {
    fn dim(&self) -> usize;

    fn num_eq(&self) -> usize {
        0
    }

    fn num_ineq(&self) -> usize {
        0
    }

    fn evaluate(&self, x: &Vector) -> Evaluation;

    fn derivatives(&self, x: &Vector) -> Derivatives;

    /// Per-coordinate box; infinite entries are unbounded.
    fn bounds(&self) -> (Vector, Vector) {
        let n = self.dim();
        (
            Vector::from_element(n, f64::NEG_INFINITY),
            Vector::from_element(n, f64::INFINITY),
        )
    }

    /// Lower and upper limits on the general inequality functions.
    fn ineq_bounds(&self) -> (Vector, Vector) {
        let k = self.num_ineq();
        (
            Vector::from_element(k, f64::NEG_INFINITY),
            Vector::from_element(k, f64::INFINITY),
        )
    }

    fn initial_hessian(&self, _x: &Vector) -> HessianInit {
        HessianInit::Identity
    }

    /// Rebuild the model from `initial_hessian` at every accepted iterate instead of
    /// updating it by BFGS (a Gauss-Newton SQP).
    fn refresh_hessian(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct SqpOptions {
    /// Max-norm bound on equality and inequality violation.
    pub feasibility_tol: f64,
    /// Max-norm bound on the Lagrangian gradient, relative to `max(1, |grad f|)`.
    pub optimality_tol: f64,
    pub max_iterations: usize,
    pub armijo: f64,
    pub min_step: f64,
    /// Stop at a feasible point once the predicted decrease falls below this
    /// fraction of `1 + |f|`.
    pub flat_decrease: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-8,
            optimality_tol: 1e-6,
            max_iterations: 200,
            armijo: 1e-4,
            min_step: 1e-12,
            flat_decrease: 1e-13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    IterationLimit,
    LineSearchFailed,
    SubproblemFailed,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: Vector,
    pub objective: f64,
    /// Max-norm of equality residuals and inequality excess.
    pub constraint_violation: f64,
    /// Relative max-norm of the Lagrangian gradient at the last QP.
    pub stationarity: f64,
    pub eq_multipliers: Vector,
    pub iterations: usize,
    pub converged: bool,
    pub status: SqpStatus,
    pub solve_seconds: f64,
}

struct Violation {
    l1: f64,
    max: f64,
}

fn violation(ev: &Evaluation, lo: &Vector, hi: &Vector) -> Violation {
    let mut l1 = 0.0;
    let mut max = 0.0f64;
    for &c in ev.eq.iter() {
        l1 += c.abs();
        max = max.max(c.abs());
    }
    for i in 0..ev.ineq.len() {
        let h = ev.ineq[i];
        let v = (lo[i] - h).max(h - hi[i]).max(0.0);
        l1 += v;
        max = max.max(v);
    }
    Violation { l1, max }
}

fn check_finite(ev: &Evaluation) -> Result<()> {
    if !ev.objective.is_finite()
        || ev.eq.iter().any(|v| !v.is_finite())
        || ev.ineq.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("NaN or infinite value in objective or constraints".into()));
    }
    Ok(())
}

fn check_derivatives(p: &dyn NlpProblem, der: &Derivatives) -> Result<()> {
    let n = p.dim();
    if der.gradient.len() != n
        || der.eq_jacobian.shape() != (p.num_eq(), n)
        || der.ineq_jacobian.shape() != (p.num_ineq(), n)
    {
        return Err(Error::Dimension("derivative shapes disagree with problem".into()));
    }
    if der.gradient.iter().any(|v| !v.is_finite())
        || der.eq_jacobian.iter().any(|v| !v.is_finite())
        || der.ineq_jacobian.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("NaN or infinite value in derivatives".into()));
    }
    Ok(())
}

fn clip(x: &mut Vector, xl: &Vector, xu: &Vector) {
    for i in 0..x.len() {
        x[i] = x[i].max(xl[i]).min(xu[i]);
    }
}

fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

struct QuasiNewton {
    b: Matrix,
    h: Matrix,
    rescale_pending: bool,
}

impl QuasiNewton {
    fn new(init: HessianInit, n: usize) -> Result<Self> {
        match init {
            HessianInit::Identity => Ok(Self {
                b: Matrix::identity(n, n),
                h: Matrix::identity(n, n),
                rescale_pending: true,
            }),
            HessianInit::Dense { hessian, inverse } => {
                if hessian.shape() != (n, n) || inverse.shape() != (n, n) {
                    return Err(Error::Dimension(format!(
                        "initial Hessian must be {n}x{n}"
                    )));
                }
                Ok(Self {
                    b: hessian,
                    h: inverse,
                    rescale_pending: false,
                })
            }
        }
    }

    /// Powell-damped BFGS update of both `B` and `H = B^-1`.
    fn update(&mut self, s: &Vector, y: &Vector) {
        let ss = s.norm_squared();
        if ss == 0.0 || !ss.is_finite() {
            return;
        }
        if self.rescale_pending {
            let yy = y.norm_squared();
            let sy = s.dot(y);
            if sy > 0.0 && yy > 0.0 {
                let gamma = sy / yy;
                self.b /= gamma;
                self.h *= gamma;
            }
            self.rescale_pending = false;
        }
        let bs = &self.b * s;
        let sbs = s.dot(&bs);
        if sbs <= 0.0 || !sbs.is_finite() {
            return;
        }
        let sy = s.dot(y);
        let theta = if sy >= 0.2 * sbs {
            1.0
        } else {
            0.8 * sbs / (sbs - sy)
        };
        let r = y * theta + &bs * (1.0 - theta);
        let sr = s.dot(&r);
        if sr <= 1e-300 {
            return;
        }
        self.b.ger(-1.0 / sbs, &bs, &bs, 1.0);
        self.b.ger(1.0 / sr, &r, &r, 1.0);

        // H+ = H - rho (s (H r)^T + (H r) s^T) + (rho^2 r'Hr + rho) s s^T
        let rho = 1.0 / sr;
        let hr = &self.h * &r;
        let rhr = r.dot(&hr);
        self.h.ger(-rho, s, &hr, 1.0);
        self.h.ger(-rho, &hr, s, 1.0);
        self.h.ger(rho * rho * rhr + rho, s, s, 1.0);
    }
}

/// Builds the single-sided inequality rows of the QP at `x`.
fn qp_rows(
    ev: &Evaluation,
    lo: &Vector,
    hi: &Vector,
    x: &Vector,
    xl: &Vector,
    xu: &Vector,
    with_general: bool,
) -> Vec<InequalityRow> {
    let mut rows = Vec::new();
    if with_general {
        for i in 0..ev.ineq.len() {
            if lo[i].is_finite() {
                rows.push(InequalityRow {
                    kind: RowKind::Jacobian(i),
                    sign: 1.0,
                    rhs: lo[i] - ev.ineq[i],
                });
            }
            if hi[i].is_finite() {
                rows.push(InequalityRow {
                    kind: RowKind::Jacobian(i),
                    sign: -1.0,
                    rhs: ev.ineq[i] - hi[i],
                });
            }
        }
    }
    for j in 0..x.len() {
        if xl[j].is_finite() {
            rows.push(InequalityRow {
                kind: RowKind::Coordinate(j),
                sign: 1.0,
                rhs: xl[j] - x[j],
            });
        }
        if xu[j].is_finite() {
            rows.push(InequalityRow {
                kind: RowKind::Coordinate(j),
                sign: -1.0,
                rhs: x[j] - xu[j],
            });
        }
    }
    rows
}

/// Gradient of the Lagrangian `f - mu_e' c - mu_i' h` (bound multipliers excluded).
fn lagrangian_gradient(der: &Derivatives, eq_mult: &Vector, ineq_mult: &Vector) -> Vector {
    let mut g = der.gradient.clone();
    if !eq_mult.is_empty() {
        g -= der.eq_jacobian.tr_mul(eq_mult);
    }
    if !ineq_mult.is_empty() {
        g -= der.ineq_jacobian.tr_mul(ineq_mult);
    }
    g
}

/// Collapses per-row QP multipliers onto general inequality functions and coordinates.
fn split_multipliers(
    rows: &[InequalityRow],
    mult: &[f64],
    num_ineq: usize,
    n: usize,
) -> (Vector, Vector) {
    let mut ineq = Vector::zeros(num_ineq);
    let mut bounds = Vector::zeros(n);
    for (row, &u) in rows.iter().zip(mult) {
        match row.kind {
            RowKind::Jacobian(i) => ineq[i] += row.sign * u,
            RowKind::Coordinate(j) => bounds[j] += row.sign * u,
        }
    }
    (ineq, bounds)
}

/// Solves `problem` from `x0` by SQP.
///
/// Running out of iterations or failing a line search is not an error: the last
/// iterate is returned with `converged == false`.
pub fn solve_nlp(problem: &dyn NlpProblem, x0: &Vector, opts: &SqpOptions) -> Result<NlpSolution> {
    let start = Instant::now();
    let n = problem.dim();
    if x0.len() != n {
        return Err(Error::Dimension(format!(
            "initial guess has length {}, problem dimension is {n}",
            x0.len()
        )));
    }
    let (xl, xu) = problem.bounds();
    let (lo, hi) = problem.ineq_bounds();
    if xl.len() != n || xu.len() != n {
        return Err(Error::Dimension("bound vectors disagree with problem dimension".into()));
    }
    if (0..n).any(|i| xl[i] > xu[i]) || (0..lo.len()).any(|i| lo[i] > hi[i]) {
        return Err(Error::Config("lower bound exceeds upper bound".into()));
    }

    let mut x = x0.clone();
    clip(&mut x, &xl, &xu);
    let mut ev = problem.evaluate(&x);
    check_finite(&ev)?;
    let mut der = problem.derivatives(&x);
    check_derivatives(problem, &der)?;
    let mut qn = QuasiNewton::new(problem.initial_hessian(&x), n)?;

    let mut penalty = 0.0f64;
    let mut status = SqpStatus::IterationLimit;
    let mut stationarity = f64::INFINITY;
    let mut eq_mult = Vector::zeros(problem.num_eq());
    let mut iterations = 0;
    let mut reset_this_iter = false;

    while iterations < opts.max_iterations {
        let eq_rhs = -&ev.eq;
        let mut rows = qp_rows(&ev, &lo, &hi, &x, &xl, &xu, true);
        let mut attempt = qp::solve(&QpData {
            h: &qn.h,
            g: &der.gradient,
            eq: &der.eq_jacobian,
            eq_rhs: &eq_rhs,
            ineq_jac: &der.ineq_jacobian,
            rows: &rows,
        });
        if attempt.is_err() && problem.num_ineq() > 0 {
            // linearized general inequalities may be inconsistent far from a solution
            rows = qp_rows(&ev, &lo, &hi, &x, &xl, &xu, false);
            attempt = qp::solve(&QpData {
                h: &qn.h,
                g: &der.gradient,
                eq: &der.eq_jacobian,
                eq_rhs: &eq_rhs,
                ineq_jac: &der.ineq_jacobian,
                rows: &rows,
            });
        }
        let QpSolution {
            d,
            eq_mult: qp_eq_mult,
            ineq_mult: row_mult,
            eq_projection,
        } = match attempt {
            Ok(sol) => sol,
            Err(_) if !reset_this_iter => {
                // an ill-conditioned inverse can make a feasible subproblem look infeasible
                qn = QuasiNewton::new(problem.initial_hessian(&x), n)?;
                reset_this_iter = true;
                continue;
            }
            Err(_) => {
                status = SqpStatus::SubproblemFailed;
                break;
            }
        };
        let (ineq_mult, bound_mult) = split_multipliers(&rows, &row_mult, problem.num_ineq(), n);
        eq_mult = qp_eq_mult;

        let viol = violation(&ev, &lo, &hi);
        let grad_l = lagrangian_gradient(&der, &eq_mult, &ineq_mult) - &bound_mult;
        let grad_scale = inf_norm(&der.gradient).max(1.0);
        stationarity = inf_norm(&grad_l) / grad_scale;
        let tiny_step = inf_norm(&d) <= 1e-14 * (1.0 + inf_norm(&x));
        // the QP model promises less decrease than the objective can resolve
        let flat = -der.gradient.dot(&d) <= opts.flat_decrease * (1.0 + ev.objective.abs());
        if viol.max <= opts.feasibility_tol && (stationarity <= opts.optimality_tol || tiny_step || flat) {
            status = SqpStatus::Converged;
            break;
        }

        let mult_scale = inf_norm(&eq_mult).max(inf_norm(&ineq_mult));
        if penalty < 1.1 * mult_scale + 1e-8 {
            penalty = 1.5 * mult_scale + 1e-8;
        }
        let merit = |e: &Evaluation| e.objective + penalty * violation(e, &lo, &hi).l1;
        let merit0 = merit(&ev);
        let slope = der.gradient.dot(&d) - penalty * viol.l1;

        let mut accepted: Option<(Vector, Evaluation)> = None;
        let mut alpha = 1.0;
        while alpha >= opts.min_step {
            let mut xt = &x + &d * alpha;
            clip(&mut xt, &xl, &xu);
            let et = problem.evaluate(&xt);
            check_finite(&et)?;
            if merit(&et) <= merit0 + opts.armijo * alpha * slope {
                accepted = Some((xt, et));
                break;
            }
            if let Some((he, s_e)) = &eq_projection {
                // second-order correction: min-norm step back onto c(x) = 0
                let rhs = Matrix::from_column_slice(et.eq.len(), 1, (-&et.eq).as_slice());
                if let Some(w) = super::linalg::solve_equilibrated(s_e, &rhs) {
                    let mut xc = &xt + he * w.column(0);
                    clip(&mut xc, &xl, &xu);
                    let ec = problem.evaluate(&xc);
                    if check_finite(&ec).is_ok()
                        && merit(&ec) <= merit0 + opts.armijo * alpha * slope
                    {
                        accepted = Some((xc, ec));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some((x_new, ev_new)) = accepted else {
            if !reset_this_iter {
                // restart the quasi-Newton model and retry once
                qn = QuasiNewton::new(problem.initial_hessian(&x), n)?;
                reset_this_iter = true;
                continue;
            }
            status = SqpStatus::LineSearchFailed;
            break;
        };
        reset_this_iter = false;
        iterations += 1;

        let der_new = problem.derivatives(&x_new);
        check_derivatives(problem, &der_new)?;
        if problem.refresh_hessian() {
            qn = QuasiNewton::new(problem.initial_hessian(&x_new), n)?;
        } else {
            let s = &x_new - &x;
            let y = lagrangian_gradient(&der_new, &eq_mult, &ineq_mult)
                - lagrangian_gradient(&der, &eq_mult, &ineq_mult);
            qn.update(&s, &y);
        }

        x = x_new;
        ev = ev_new;
        der = der_new;
    }

    let viol = violation(&ev, &lo, &hi);
    Ok(NlpSolution {
        objective: ev.objective,
        constraint_violation: viol.max,
        stationarity,
        eq_multipliers: eq_mult,
        iterations,
        converged: status == SqpStatus::Converged,
        status,
        solve_seconds: start.elapsed().as_secs_f64(),
        x,
    })
}
