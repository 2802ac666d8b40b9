//! Dual active-set (Goldfarb-Idnani) solver for the strictly convex QP subproblems of
//! the SQP method.
//!
//! The subproblem is
//!
//! ```text
//!     minimize    1/2 d' B d + g' d
//!     subject to  E d  = e
//!                 a_i' d >= b_i      (inequality rows, including simple bounds)
//! ```
//!
//! and is solved in range-space form using an explicit `H = B^-1`, which the BFGS
//! update maintains directly. Starting from the equality-constrained minimizer, the
//! most violated inequality is added at each outer step; constraints whose
//! multipliers would turn negative are dropped on the way.

use super::linalg::{solve_equilibrated, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum RowKind {
    /// Row `i` of the inequality Jacobian.
    Jacobian(usize),
    /// Coordinate `j` (a simple bound on the step).
    Coordinate(usize),
}

/// One single-sided inequality `sign * (normal . d) >= rhs`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct InequalityRow {
    pub kind: RowKind,
    pub sign: f64,
    pub rhs: f64,
}

pub(crate) struct QpData<'a> {
    pub h: &'a Matrix,
    pub g: &'a Vector,
    pub eq: &'a Matrix,
    pub eq_rhs: &'a Vector,
    pub ineq_jac: &'a Matrix,
    pub rows: &'a [InequalityRow],
}

#[derive(Debug)]
pub(crate) struct QpSolution {
    pub d: Vector,
    pub eq_mult: Vector,
    /// Multiplier per inequality row (zero when inactive).
    pub ineq_mult: Vec<f64>,
    /// `H E^T` and `E H E^T`, reused for second-order corrections.
    pub eq_projection: Option<(Matrix, Matrix)>,
}

#[derive(Debug, PartialEq)]
pub(crate) enum QpFailure {
    Infeasible,
    SingularEqualities,
    Stalled,
}

#[derive(Clone, Copy, PartialEq)]
enum Id {
    Eq(usize),
    Ineq(usize),
}

struct Active {
    id: Id,
    ha: Vector,
    mult: f64,
}

impl QpData<'_> {
    fn dot(&self, id: Id, v: &Vector) -> f64 {
        match id {
            Id::Eq(i) => self.eq.row(i).transpose().dot(v),
            Id::Ineq(r) => {
                let row = &self.rows[r];
                let raw = match row.kind {
                    RowKind::Jacobian(i) => self.ineq_jac.row(i).transpose().dot(v),
                    RowKind::Coordinate(j) => v[j],
                };
                row.sign * raw
            }
        }
    }

    fn h_times(&self, id: Id) -> Vector {
        match id {
            Id::Eq(i) => self.h * self.eq.row(i).transpose(),
            Id::Ineq(r) => {
                let row = &self.rows[r];
                match row.kind {
                    RowKind::Jacobian(i) => (self.h * self.ineq_jac.row(i).transpose()) * row.sign,
                    RowKind::Coordinate(j) => self.h.column(j) * row.sign,
                }
            }
        }
    }

    fn normal_norm(&self, r: usize) -> f64 {
        match self.rows[r].kind {
            RowKind::Jacobian(i) => self.ineq_jac.row(i).norm(),
            RowKind::Coordinate(_) => 1.0,
        }
    }
}

fn gram(data: &QpData<'_>, active: &[Active]) -> Matrix {
    let k = active.len();
    let mut s = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            s[(i, j)] = data.dot(active[i].id, &active[j].ha);
        }
    }
    s
}

pub(crate) fn solve(data: &QpData<'_>) -> Result<QpSolution, QpFailure> {
    let n = data.g.len();
    let m = data.eq.nrows();
    let mut d = -(data.h * data.g);
    let mut active: Vec<Active> = Vec::new();
    let mut eq_projection = None;

    if m > 0 {
        let he = data.h * data.eq.transpose();
        let s_e = data.eq * &he;
        let resid = data.eq_rhs - data.eq * &d;
        let rhs = Matrix::from_column_slice(m, 1, resid.as_slice());
        let u = solve_equilibrated(&s_e, &rhs).ok_or(QpFailure::SingularEqualities)?;
        d += &he * u.column(0);
        for i in 0..m {
            active.push(Active {
                id: Id::Eq(i),
                ha: he.column(i).clone_owned(),
                mult: u[(i, 0)],
            });
        }
        eq_projection = Some((he, s_e));
    }

    let mut in_set = vec![false; data.rows.len()];
    let max_steps = 20 * (data.rows.len() + m) + 200;
    let mut steps = 0usize;
    let mut s = gram(data, &active);

    loop {
        // most violated inequality, measured relative to its normal
        let mut pick: Option<(usize, f64)> = None;
        for (r, row) in data.rows.iter().enumerate() {
            if in_set[r] {
                continue;
            }
            let viol = row.rhs - data.dot(Id::Ineq(r), &d);
            let tol = 1e-11 * (1.0 + row.rhs.abs());
            if viol > tol {
                let scaled = viol / data.normal_norm(r).max(f64::MIN_POSITIVE);
                if pick.is_none_or(|(_, best)| scaled > best) {
                    pick = Some((r, scaled));
                }
            }
        }
        let Some((p, _)) = pick else { break };
        let p_id = Id::Ineq(p);
        let hp = data.h_times(p_id);
        let a_hp = data.dot(p_id, &hp);
        let mut u_p = 0.0;

        loop {
            steps += 1;
            if steps > max_steps {
                return Err(QpFailure::Stalled);
            }
            let k = active.len();
            let r = if k > 0 {
                let rhs = Matrix::from_fn(k, 1, |i, _| data.dot(active[i].id, &hp));
                solve_equilibrated(&s, &rhs)
                    .ok_or(QpFailure::Stalled)?
                    .column(0)
                    .clone_owned()
            } else {
                Vector::zeros(0)
            };
            let mut z = hp.clone();
            for (i, a) in active.iter().enumerate() {
                z.axpy(-r[i], &a.ha, 1.0);
            }

            let mut t1 = f64::INFINITY;
            let mut blocking = None;
            for (i, a) in active.iter().enumerate() {
                if matches!(a.id, Id::Ineq(_)) && r[i] > 1e-14 {
                    let ratio = a.mult / r[i];
                    if ratio < t1 {
                        t1 = ratio;
                        blocking = Some(i);
                    }
                }
            }

            let az = data.dot(p_id, &z);
            let t2 = if az > 1e-12 * a_hp.abs().max(f64::MIN_POSITIVE) {
                (data.rows[p].rhs - data.dot(p_id, &d)) / az
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpFailure::Infeasible);
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                d.axpy(t, &z, 1.0);
            }
            for (i, a) in active.iter_mut().enumerate() {
                a.mult -= t * r[i];
            }
            u_p += t;

            if t2 <= t1 {
                let k = active.len();
                let mut grown = Matrix::zeros(k + 1, k + 1);
                grown.view_mut((0, 0), (k, k)).copy_from(&s);
                for i in 0..k {
                    let v = data.dot(active[i].id, &hp);
                    grown[(i, k)] = v;
                    grown[(k, i)] = v;
                }
                grown[(k, k)] = a_hp;
                s = grown;
                active.push(Active {
                    id: p_id,
                    ha: hp,
                    mult: u_p,
                });
                in_set[p] = true;
                break;
            }

            let b = blocking.expect("finite t1 has a blocking constraint");
            if let Id::Ineq(r_idx) = active[b].id {
                in_set[r_idx] = false;
            }
            active.remove(b);
            s = s.remove_row(b).remove_column(b);
        }
    }

    let mut eq_mult = Vector::zeros(m);
    let mut ineq_mult = vec![0.0; data.rows.len()];
    for a in &active {
        match a.id {
            Id::Eq(i) => eq_mult[i] = a.mult,
            Id::Ineq(r) => ineq_mult[r] = a.mult.max(0.0),
        }
    }
    debug_assert_eq!(d.len(), n);
    Ok(QpSolution {
        d,
        eq_mult,
        ineq_mult,
        eq_projection,
    })
}
