//! SVD-based dense linear algebra: pseudo-inverse, null space, rank.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

/// Default relative singular-value cutoff.
pub const DEFAULT_SV_TOL: f64 = 1e-10;

const SVD_MAX_ITER: usize = 10_000;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

fn ensure_nonempty(m: &Matrix, op: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "{op}: empty {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn ensure_finite(m: &Matrix, op: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{op}: matrix has non-finite entries")));
    }
    Ok(())
}

/// Thin SVD with both singular-vector sets.
pub fn svd(m: &Matrix) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    ensure_nonempty(m, "svd")?;
    ensure_finite(m, "svd")?;
    SVD::try_new(m.clone(), true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("svd did not converge".into()))
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vector> {
    ensure_nonempty(m, "singular_values")?;
    ensure_finite(m, "singular_values")?;
    let sv = SVD::try_new(m.clone(), false, false, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("svd did not converge".into()))?
        .singular_values;
    let mut v: Vec<f64> = sv.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(Vector::from_vec(v))
}

fn cutoff(sv: &Vector, tol: f64) -> f64 {
    let smax = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    tol * smax
}

/// Numerical rank with a relative cutoff `tol * sigma_max`.
pub fn rank(m: &Matrix, tol: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    let c = cutoff(&sv, tol);
    Ok(sv.iter().filter(|&&s| s > c && s > 0.0).count())
}

/// Moore-Penrose pseudo-inverse. Singular values at or below `tol * sigma_max` are
/// treated as zero.
pub fn pseudo_inverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    let dec = svd(m)?;
    let u = dec.u.as_ref().expect("u requested");
    let v_t = dec.v_t.as_ref().expect("v_t requested");
    let sv = &dec.singular_values;
    let c = cutoff(sv, tol);

    // pinv = V * diag(1/s) * U^T over the retained singular values
    let mut scaled_vt = v_t.clone();
    for (i, &s) in sv.iter().enumerate() {
        let f = if s > c && s > 0.0 { 1.0 / s } else { 0.0 };
        scaled_vt.row_mut(i).scale_mut(f);
    }
    Ok(scaled_vt.transpose() * u.transpose())
}

/// Orthonormal basis of `{v : M v = 0}`, one basis vector per column.
///
/// Directions whose singular value falls at or below `tol * sigma_max` count as
/// part of the kernel. A matrix with full column rank yields an `ncols x 0` basis.
pub fn nullspace_basis(m: &Matrix, tol: f64) -> Result<Matrix> {
    let dec = svd(m)?;
    let v_t = dec.v_t.as_ref().expect("v_t requested");
    let sv = &dec.singular_values;
    let c = cutoff(sv, tol);

    let keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > c && sv[i] > 0.0).collect();
    let n = m.ncols();
    let mut row_space = Matrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        row_space.set_column(j, &v_t.row(i).transpose());
    }
    Ok(orthonormal_complement(&row_space))
}

/// Given `n x k` orthonormal columns, returns `n x (n - k)` orthonormal columns spanning
/// their orthogonal complement.
///
/// Uses a Householder QR of the input and applies the reflectors to the trailing
/// identity columns.
pub fn orthonormal_complement(basis: &Matrix) -> Matrix {
    let n = basis.nrows();
    let k = basis.ncols();
    assert!(k <= n, "more basis vectors than the ambient dimension");
    if k == 0 {
        return Matrix::identity(n, n);
    }

    let mut work = basis.clone();
    let mut reflectors: Vec<Vector> = Vec::with_capacity(k);
    for j in 0..k {
        let x = work.view((j, j), (n - j, 1)).clone_owned();
        let norm = x.norm();
        let mut v = Vector::zeros(n - j);
        v.copy_from(&x.column(0));
        let alpha = if x[(0, 0)] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            // apply H = I - 2 v v^T / (v^T v) to the trailing block
            let mut block = work.view_mut((j, j), (n - j, k - j));
            let proj = block.tr_mul(&v) * (2.0 / vnorm2);
            block.ger(-1.0, &v, &proj, 1.0);
        }
        reflectors.push(v);
    }

    let mut out = Matrix::zeros(n, n - k);
    for c in 0..(n - k) {
        out[(k + c, c)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        let mut block = out.view_mut((j, 0), (n - j, n - k));
        let proj = block.tr_mul(v) * (2.0 / vnorm2);
        block.ger(-1.0, v, &proj, 1.0);
    }
    out
}

/// Solves `S x = b` for a small dense symmetric system, after symmetric diagonal
/// equilibration. Returns `None` when the system is numerically singular.
pub fn solve_equilibrated(s: &Matrix, b: &Matrix) -> Option<Matrix> {
    let n = s.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = s[(i, i)].abs();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = Matrix::from_fn(n, n, |i, j| s[(i, j)] * scale[i] * scale[j]);
    let rhs = Matrix::from_fn(n, b.ncols(), |i, j| b[(i, j)] * scale[i]);
    let lu = scaled.full_piv_lu();
    let mut x = lu.solve(&rhs)?;
    for i in 0..n {
        x.row_mut(i).scale_mut(scale[i]);
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Infinity norm (max absolute entry) of a matrix or vector.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pinv_identity() {
        let i = Matrix::identity(3, 3);
        let p = pseudo_inverse(&i, 1e-12).unwrap();
        assert_abs_diff_eq!(p, i, epsilon = 1e-14);
    }

    #[test]
    fn pinv_zero_matrix_is_transposed_zero() {
        let z = Matrix::zeros(2, 3);
        let p = pseudo_inverse(&z, DEFAULT_SV_TOL).unwrap();
        assert_eq!(p.shape(), (3, 2));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pinv_rank_one_diagonal() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = pseudo_inverse(&m, DEFAULT_SV_TOL).unwrap();
        assert_abs_diff_eq!(p, m, epsilon = 1e-14);
    }

    #[test]
    fn pinv_rejects_empty() {
        let m = Matrix::zeros(0, 3);
        assert!(matches!(pseudo_inverse(&m, 1e-10), Err(Error::Dimension(_))));
    }

    #[test]
    fn nullspace_axis_aligned() {
        let m = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let n = nullspace_basis(&m, DEFAULT_SV_TOL).unwrap();
        assert_eq!(n.shape(), (2, 1));
        assert_abs_diff_eq!(n[(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(n[(1, 0)].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nullspace_full_column_rank_is_empty() {
        let n = nullspace_basis(&Matrix::identity(2, 2), DEFAULT_SV_TOL).unwrap();
        assert_eq!(n.shape(), (2, 0));
    }

    #[test]
    fn nullspace_of_sum_row() {
        let m = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let n = nullspace_basis(&m, DEFAULT_SV_TOL).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let sign = n[(0, 0)].signum();
        assert_abs_diff_eq!(n[(0, 0)] * sign, h, epsilon = 1e-14);
        assert_abs_diff_eq!(n[(1, 0)] * sign, -h, epsilon = 1e-14);
    }

    #[test]
    fn nullspace_of_zero_matrix_is_everything() {
        let n = nullspace_basis(&Matrix::zeros(2, 3), DEFAULT_SV_TOL).unwrap();
        assert_eq!(n.shape(), (3, 3));
        assert_abs_diff_eq!(n.transpose() * &n, Matrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn complement_is_orthogonal() {
        let b = Matrix::from_column_slice(3, 1, &[0.6, 0.8, 0.0]);
        let c = orthonormal_complement(&b);
        assert_eq!(c.shape(), (3, 2));
        assert!(max_abs(&(b.transpose() * &c)) < 1e-14);
        assert_abs_diff_eq!(c.transpose() * &c, Matrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn rank_counts_retained_values() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert_eq!(rank(&m, DEFAULT_SV_TOL).unwrap(), 2);
    }

    #[test]
    fn non_finite_input_is_numerical_error() {
        let m = Matrix::from_row_slice(1, 2, &[f64::NAN, 1.0]);
        assert!(matches!(svd(&m), Err(Error::Numerical(_))));
    }
}
