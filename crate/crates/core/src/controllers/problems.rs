//! The three receding-horizon NLPs.
//!
//! Shared notation: `phi(u)` is the hidden map at `col(u_ini, y_ini, u)`, `J` its
//! Jacobian in `u`, `P = [P_phi p_1]` the pseudo-inverse of `[Phi_bar; 1^T]` and
//! `W = Y_f P = [W_phi w_1]` the least-squares output map. Output costs cover
//! `y(1..N)`, the last one being the terminal cost; input costs cover `u(0..N-1)`.

use crate::numerics::{Derivatives, Evaluation, HessianInit, Matrix, NlpProblem, Vector};

use super::Prepared;

/// Per-step data common to all formulations.
pub(crate) struct StepData<'a> {
    pub prep: &'a Prepared,
    pub u_ini: &'a [f64],
    pub y_ini: &'a [f64],
    pub y_ref: Vector,
    pub u_ref: Vector,
}

impl StepData<'_> {
    fn nu(&self) -> usize {
        self.prep.ctx.layout.m * self.prep.ctx.layout.horizon
    }

    fn ny(&self) -> usize {
        self.prep.ctx.layout.output_dim()
    }

    /// `phi(u)` and its Jacobian with respect to the future inputs.
    pub fn hidden(&self, u: &[f64]) -> (Vector, Matrix) {
        let ctx = &self.prep.ctx;
        let reg = ctx
            .layout
            .build(self.u_ini, self.y_ini, u)
            .expect("window lengths validated by the controller");
        let (phi, jac) = ctx
            .net
            .hidden_with_jacobian(&reg)
            .expect("regressor matches network input");
        let j = jac.columns(ctx.layout.future_offset(), self.nu()).clone_owned();
        (phi, j)
    }

    /// Output-plus-input tracking cost and its gradients in `y` and `u`.
    fn tracking(&self, y: &Vector, u: &[f64]) -> (f64, Vector, Vector) {
        let ey = y - &self.y_ref;
        let eu = Vector::from_column_slice(u) - &self.u_ref;
        let qey = &self.prep.qbar * &ey;
        let reu = &self.prep.rbar * &eu;
        (ey.dot(&qey) + eu.dot(&reu), qey * 2.0, reu * 2.0)
    }

    fn y_nls(&self, phi: &Vector) -> Vector {
        let mut y = self.prep.w1.clone();
        y.gemv(1.0, &self.prep.w_phi, phi, 1.0);
        y
    }

    fn g_nls(&self, phi: &Vector) -> Vector {
        let mut g = self.prep.p1.clone();
        g.gemv(1.0, &self.prep.p_phi, phi, 1.0);
        g
    }

    fn u_bounds(&self) -> (f64, f64) {
        self.prep.cfg.u_bounds
    }

    fn y_bounds(&self) -> (f64, f64) {
        self.prep.cfg.y_bounds
    }
}

/// Inverse of `D + G^T C G` by the Woodbury identity, with `D` block diagonal and
/// given through its inverse.
fn woodbury_inverse(d_inv: &Matrix, g: &Matrix, c: &Matrix) -> Option<Matrix> {
    let dg = d_inv * g.transpose();
    let k = g.nrows();
    let inner = Matrix::identity(k, k) + g * &dg * c;
    let solved = inner.lu().solve(&(c * dg.transpose()))?;
    Some(d_inv - &dg * solved)
}

fn dense_init(b: Matrix) -> HessianInit {
    HessianInit::from_hessian(b).unwrap_or(HessianInit::Identity)
}

/// Variables `(y, u, g)`; equalities `[Phi_bar; 1^T; Y_f] g = col(phi(u), 1, y)`.
pub(crate) struct ProblemOne<'a> {
    pub data: StepData<'a>,
}

impl ProblemOne<'_> {
    fn split<'x>(&self, x: &'x Vector) -> (Vector, &'x [f64], Vector) {
        let (ny, nu) = (self.data.ny(), self.data.nu());
        let s = x.as_slice();
        (
            Vector::from_column_slice(&s[..ny]),
            &s[ny..ny + nu],
            Vector::from_column_slice(&s[ny + nu..]),
        )
    }
}

impl NlpProblem for ProblemOne<'_> {
    fn dim(&self) -> usize {
        self.data.ny() + self.data.nu() + self.data.prep.ctx.columns()
    }

    fn num_eq(&self) -> usize {
        self.data.prep.ctx.augmented.nrows() + self.data.ny()
    }

    fn evaluate(&self, x: &Vector) -> Evaluation {
        let (y, u, g) = self.split(x);
        let (phi, _) = self.data.hidden(u);
        let ctx = &self.data.prep.ctx;
        let d = &g - self.data.g_nls(&phi);
        let (track, _, _) = self.data.tracking(&y, u);
        let objective = track + self.data.prep.cfg.lambda * d.norm_squared();

        let l = ctx.basis_width();
        let mut eq = Vector::zeros(self.num_eq());
        let ag = &ctx.augmented * &g;
        for i in 0..l {
            eq[i] = ag[i] - phi[i];
        }
        eq[l] = ag[l] - 1.0;
        let yg = &ctx.y_f * &g - &y;
        eq.rows_mut(l + 1, self.data.ny()).copy_from(&yg);
        Evaluation {
            objective,
            eq,
            ineq: Vector::zeros(0),
        }
    }

    fn derivatives(&self, x: &Vector) -> Derivatives {
        let (y, u, g) = self.split(x);
        let (phi, jphi) = self.data.hidden(u);
        let ctx = &self.data.prep.ctx;
        let lambda = self.data.prep.cfg.lambda;
        let (ny, nu, t) = (self.data.ny(), self.data.nu(), ctx.columns());
        let l = ctx.basis_width();

        let d = &g - self.data.g_nls(&phi);
        let (_, gy, gu) = self.data.tracking(&y, u);
        let pd = self.data.prep.p_phi.tr_mul(&d);
        let gu = gu - jphi.tr_mul(&pd) * (2.0 * lambda);
        let mut gradient = Vector::zeros(self.dim());
        gradient.rows_mut(0, ny).copy_from(&gy);
        gradient.rows_mut(ny, nu).copy_from(&gu);
        gradient.rows_mut(ny + nu, t).copy_from(&(d * (2.0 * lambda)));

        let mut jac = Matrix::zeros(self.num_eq(), self.dim());
        jac.view_mut((0, ny), (l, nu)).copy_from(&(-&jphi));
        jac.view_mut((0, ny + nu), (l + 1, t)).copy_from(&ctx.augmented);
        for i in 0..ny {
            jac[(l + 1 + i, i)] = -1.0;
        }
        jac.view_mut((l + 1, ny + nu), (ny, t)).copy_from(&ctx.y_f);
        Derivatives {
            gradient,
            eq_jacobian: jac,
            ineq_jacobian: Matrix::zeros(0, self.dim()),
        }
    }

    fn bounds(&self) -> (Vector, Vector) {
        let (ny, nu) = (self.data.ny(), self.data.nu());
        let n = self.dim();
        let mut lo = Vector::from_element(n, f64::NEG_INFINITY);
        let mut hi = Vector::from_element(n, f64::INFINITY);
        let (ymin, ymax) = self.data.y_bounds();
        let (umin, umax) = self.data.u_bounds();
        lo.rows_mut(0, ny).fill(ymin);
        hi.rows_mut(0, ny).fill(ymax);
        lo.rows_mut(ny, nu).fill(umin);
        hi.rows_mut(ny, nu).fill(umax);
        (lo, hi)
    }

    /// BFGS stalls on the `lam ||g - g_nls(u)||^2` coupling; the Gauss-Newton model
    /// tracks it exactly.
    fn refresh_hessian(&self) -> bool {
        true
    }

    /// Gauss-Newton model. With `M = P_phi J` the `(u, g)` block is
    /// `[[2R + 2 lam M'M, -2 lam M'], [-2 lam M, 2 lam I]]`, whose inverse is
    /// `[[(2R)^-1, (2R)^-1 M'], [M (2R)^-1, I/(2 lam) + M (2R)^-1 M']]`.
    fn initial_hessian(&self, x: &Vector) -> HessianInit {
        let (_, u, _) = self.split(x);
        let (_, jphi) = self.data.hidden(u);
        let prep = self.data.prep;
        let lambda = prep.cfg.lambda;
        let (ny, nu, t) = (self.data.ny(), self.data.nu(), prep.ctx.columns());
        let n = self.dim();
        let m = &prep.p_phi * &jphi;

        let mut b = Matrix::zeros(n, n);
        b.view_mut((0, 0), (ny, ny)).copy_from(&prep.q2_reg);
        let mtm = m.tr_mul(&m) * (2.0 * lambda);
        b.view_mut((ny, ny), (nu, nu)).copy_from(&(&prep.r2 + mtm));
        let cross = m.transpose() * (-2.0 * lambda);
        b.view_mut((ny, ny + nu), (nu, t)).copy_from(&cross);
        b.view_mut((ny + nu, ny), (t, nu)).copy_from(&cross.transpose());
        for i in 0..t {
            b[(ny + nu + i, ny + nu + i)] = 2.0 * lambda;
        }

        let mut h = Matrix::zeros(n, n);
        h.view_mut((0, 0), (ny, ny)).copy_from(&prep.q2_reg_inv);
        h.view_mut((ny, ny), (nu, nu)).copy_from(&prep.r2_inv);
        let rm = &prep.r2_inv * m.transpose();
        h.view_mut((ny, ny + nu), (nu, t)).copy_from(&rm);
        h.view_mut((ny + nu, ny), (t, nu)).copy_from(&rm.transpose());
        let mut hgg = &m * &rm;
        for i in 0..t {
            hgg[(i, i)] += 0.5 / lambda;
        }
        h.view_mut((ny + nu, ny + nu), (t, t)).copy_from(&hgg);
        HessianInit::Dense { hessian: b, inverse: h }
    }
}

/// Variables `(u, g_hat)`; `y = W phi(u) + Y_f g_hat` eliminated; `[Phi_bar; 1^T] g_hat = 0`.
pub(crate) struct ProblemTwo<'a> {
    pub data: StepData<'a>,
    /// Pins `g_hat` to zero through its bounds.
    pub fix_aux: bool,
}

impl ProblemTwo<'_> {
    pub fn outputs(&self, x: &Vector) -> Vector {
        let nu = self.data.nu();
        let (phi, _) = self.data.hidden(&x.as_slice()[..nu]);
        let g_hat = x.rows(nu, x.len() - nu);
        self.data.y_nls(&phi) + &self.data.prep.ctx.y_f * g_hat
    }

    fn output_jacobian(&self, jphi: &Matrix) -> Matrix {
        let (ny, nu) = (self.data.ny(), self.data.nu());
        let t = self.data.prep.ctx.columns();
        let mut g = Matrix::zeros(ny, nu + t);
        g.view_mut((0, 0), (ny, nu)).copy_from(&(&self.data.prep.w_phi * jphi));
        g.view_mut((0, nu), (ny, t)).copy_from(&self.data.prep.ctx.y_f);
        g
    }
}

impl NlpProblem for ProblemTwo<'_> {
    fn dim(&self) -> usize {
        self.data.nu() + self.data.prep.ctx.columns()
    }

    fn num_eq(&self) -> usize {
        self.data.prep.ctx.augmented.nrows()
    }

    fn num_ineq(&self) -> usize {
        self.data.ny()
    }

    fn evaluate(&self, x: &Vector) -> Evaluation {
        let nu = self.data.nu();
        let y = self.outputs(x);
        let g_hat = x.rows(nu, x.len() - nu);
        let (track, _, _) = self.data.tracking(&y, &x.as_slice()[..nu]);
        Evaluation {
            objective: track + self.data.prep.cfg.lambda * g_hat.norm_squared(),
            eq: &self.data.prep.ctx.augmented * g_hat,
            ineq: y,
        }
    }

    fn derivatives(&self, x: &Vector) -> Derivatives {
        let nu = self.data.nu();
        let u = &x.as_slice()[..nu];
        let (phi, jphi) = self.data.hidden(u);
        let ctx = &self.data.prep.ctx;
        let g_hat = x.rows(nu, x.len() - nu);
        let y = self.data.y_nls(&phi) + &ctx.y_f * g_hat;
        let (_, gy, gu) = self.data.tracking(&y, u);
        let jy = self.output_jacobian(&jphi);
        let mut gradient = jy.tr_mul(&gy);
        let mut tail = gradient.rows_mut(nu, ctx.columns());
        tail += g_hat * (2.0 * self.data.prep.cfg.lambda);
        gradient.rows_mut(0, nu).add_assign(&gu);

        let mut eq_jacobian = Matrix::zeros(self.num_eq(), self.dim());
        eq_jacobian.view_mut((0, nu), (ctx.augmented.nrows(), ctx.columns())).copy_from(&ctx.augmented);
        Derivatives {
            gradient,
            eq_jacobian,
            ineq_jacobian: jy,
        }
    }

    fn bounds(&self) -> (Vector, Vector) {
        let nu = self.data.nu();
        let n = self.dim();
        let aux = if self.fix_aux { 0.0 } else { f64::INFINITY };
        let mut lo = Vector::from_element(n, -aux);
        let mut hi = Vector::from_element(n, aux);
        let (umin, umax) = self.data.u_bounds();
        lo.rows_mut(0, nu).fill(umin);
        hi.rows_mut(0, nu).fill(umax);
        (lo, hi)
    }

    fn ineq_bounds(&self) -> (Vector, Vector) {
        let (ymin, ymax) = self.data.y_bounds();
        let ny = self.data.ny();
        (Vector::from_element(ny, ymin), Vector::from_element(ny, ymax))
    }

    /// Gauss-Newton model `G' 2Q G + diag(2R, 2 lam I)` with `G` the output Jacobian.
    fn initial_hessian(&self, x: &Vector) -> HessianInit {
        let nu = self.data.nu();
        let (_, jphi) = self.data.hidden(&x.as_slice()[..nu]);
        let prep = self.data.prep;
        let lambda = prep.cfg.lambda;
        let n = self.dim();
        let g = self.output_jacobian(&jphi);

        let mut d_inv = Matrix::zeros(n, n);
        d_inv.view_mut((0, 0), (nu, nu)).copy_from(&prep.r2_inv);
        for i in nu..n {
            d_inv[(i, i)] = 0.5 / lambda;
        }
        let mut b = g.tr_mul(&(&prep.q2 * &g));
        b.view_mut((0, 0), (nu, nu)).add_assign(&prep.r2);
        for i in nu..n {
            b[(i, i)] += 2.0 * lambda;
        }
        match woodbury_inverse(&d_inv, &g, &prep.q2) {
            Some(h) => HessianInit::Dense { hessian: b, inverse: h },
            None => dense_init(b),
        }
    }
}

/// Variables `(u, g_tilde)`; `y = W phi(u) + g_tilde` eliminated. The slack on
/// `K g_tilde = s`, `K = [Phi_bar; 1^T] Y_f^+`, is eliminated as the penalty
/// `rho |K g_tilde|^2`; without slack the constraint is kept as equalities on an
/// orthonormal basis of the row space of `K`.
pub(crate) struct ProblemThree<'a> {
    pub data: StepData<'a>,
    pub slack: bool,
}

impl ProblemThree<'_> {
    pub fn outputs(&self, x: &Vector) -> Vector {
        let nu = self.data.nu();
        let (phi, _) = self.data.hidden(&x.as_slice()[..nu]);
        self.data.y_nls(&phi) + x.rows(nu, self.data.ny())
    }

    fn output_jacobian(&self, jphi: &Matrix) -> Matrix {
        let (ny, nu) = (self.data.ny(), self.data.nu());
        let mut g = Matrix::zeros(ny, nu + ny);
        g.view_mut((0, 0), (ny, nu)).copy_from(&(&self.data.prep.w_phi * jphi));
        g.view_mut((0, nu), (ny, ny)).fill_with_identity();
        g
    }

    fn aux_weight(&self) -> Matrix {
        let prep = self.data.prep;
        let ny = self.data.ny();
        let mut w = Matrix::identity(ny, ny) * prep.cfg.lambda;
        if self.slack {
            w += &prep.p3.ktk * prep.cfg.slack_penalty;
        }
        w
    }
}

impl NlpProblem for ProblemThree<'_> {
    fn dim(&self) -> usize {
        self.data.nu() + self.data.ny()
    }

    fn num_eq(&self) -> usize {
        if self.slack {
            0
        } else {
            self.data.prep.p3.row_basis.ncols()
        }
    }

    fn num_ineq(&self) -> usize {
        self.data.ny()
    }

    fn evaluate(&self, x: &Vector) -> Evaluation {
        let nu = self.data.nu();
        let y = self.outputs(x);
        let aux = x.rows(nu, self.data.ny()).clone_owned();
        let (track, _, _) = self.data.tracking(&y, &x.as_slice()[..nu]);
        let objective = track + aux.dot(&(self.aux_weight() * &aux));
        let eq = if self.slack {
            Vector::zeros(0)
        } else {
            self.data.prep.p3.row_basis.tr_mul(&aux)
        };
        Evaluation { objective, eq, ineq: y }
    }

    fn derivatives(&self, x: &Vector) -> Derivatives {
        let (nu, ny) = (self.data.nu(), self.data.ny());
        let u = &x.as_slice()[..nu];
        let (phi, jphi) = self.data.hidden(u);
        let aux = x.rows(nu, ny).clone_owned();
        let y = self.data.y_nls(&phi) + &aux;
        let (_, gy, gu) = self.data.tracking(&y, u);
        let jy = self.output_jacobian(&jphi);
        let mut gradient = jy.tr_mul(&gy);
        gradient.rows_mut(0, nu).add_assign(&gu);
        gradient.rows_mut(nu, ny).add_assign(&(self.aux_weight() * &aux * 2.0));

        let mut eq_jacobian = Matrix::zeros(self.num_eq(), self.dim());
        if !self.slack {
            eq_jacobian
                .view_mut((0, nu), (self.num_eq(), ny))
                .copy_from(&self.data.prep.p3.row_basis.transpose());
        }
        Derivatives {
            gradient,
            eq_jacobian,
            ineq_jacobian: jy,
        }
    }

    fn bounds(&self) -> (Vector, Vector) {
        let nu = self.data.nu();
        let n = self.dim();
        let mut lo = Vector::from_element(n, f64::NEG_INFINITY);
        let mut hi = Vector::from_element(n, f64::INFINITY);
        let (umin, umax) = self.data.u_bounds();
        lo.rows_mut(0, nu).fill(umin);
        hi.rows_mut(0, nu).fill(umax);
        (lo, hi)
    }

    fn ineq_bounds(&self) -> (Vector, Vector) {
        let (ymin, ymax) = self.data.y_bounds();
        let ny = self.data.ny();
        (Vector::from_element(ny, ymin), Vector::from_element(ny, ymax))
    }

    fn initial_hessian(&self, x: &Vector) -> HessianInit {
        let nu = self.data.nu();
        let (_, jphi) = self.data.hidden(&x.as_slice()[..nu]);
        let prep = self.data.prep;
        let g = self.output_jacobian(&jphi);
        let mut b = g.tr_mul(&(&prep.q2 * &g));
        b.view_mut((0, 0), (nu, nu)).add_assign(&prep.r2);
        b.view_mut((nu, nu), (self.data.ny(), self.data.ny()))
            .add_assign(&(self.aux_weight() * 2.0));
        dense_init(b)
    }
}

use std::ops::AddAssign;
