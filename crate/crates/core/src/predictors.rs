//! Point and set-valued predictors built on the neural data matrix, and the
//! certificate deciding when the two coincide.
//!
//! With `A = [Phi_bar; 1^T]`, the set-valued predictor collects `Y_f g` over all `g`
//! with `A g = col(phi, 1)`. Every such `g` is `g_nls + g_hat` with `g_nls = A^+ col(phi, 1)`
//! and `g_hat` in the null space of `A`, and `Y_f g_hat = E g_hat` where `E` is the
//! least-squares residual of `Y_f` against `A`. The set collapses to the point
//! prediction exactly when `E` annihilates that null space.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hankel::{HankelSet, RegressorLayout};
use crate::mlp::{augment, neural_data_matrix, refit_output_layer, MlpNetwork, RefitReport};
use crate::numerics::{max_abs, nullspace_basis, pseudo_inverse, singular_values, Matrix, Vector, DEFAULT_SV_TOL};

/// Default threshold on the certificate value.
pub const DEFAULT_EQUIVALENCE_TOL: f64 = 1e-6;

/// Data frozen for online control.
#[derive(Debug, Clone)]
pub struct DeepcContext {
    /// Network with the least-squares output layer installed.
    pub net: MlpNetwork,
    pub layout: RegressorLayout,
    /// Regressor matrix `[U_p; Y_p; U_f]`.
    pub h: Matrix,
    pub y_f: Matrix,
    pub phi_bar: Matrix,
    /// `[Phi_bar; 1^T]`.
    pub augmented: Matrix,
    pub pinv_aug: Matrix,
    /// `Y_f pinv_aug = [W_o b_o]`.
    pub output_map: Matrix,
    /// Orthonormal basis of the null space of `augmented`.
    pub null_basis: Matrix,
    pub min_singular_value: f64,
    pub full_row_rank: bool,
    /// Present when `Y_f` has full row rank.
    pub y_f_pinv: Option<Matrix>,
    pub y_f_min_singular_value: f64,
    pub refit: RefitReport,
    pub sv_tol: f64,
}

impl DeepcContext {
    /// Builds the context from a trained network and the Hankel data, refitting the
    /// output layer by least squares.
    pub fn prepare(net: &MlpNetwork, hankel: &HankelSet, sv_tol: f64) -> Result<Self> {
        Self::from_parts(net, hankel.layout, hankel.h.clone(), hankel.y_f.clone(), sv_tol)
    }

    /// Context whose hidden map is the identity, so `Phi_bar = H`.
    pub fn linear(hankel: &HankelSet, sv_tol: f64) -> Result<Self> {
        let net = MlpNetwork::linear_identity(hankel.layout.dim(), hankel.layout.output_dim())?;
        Self::prepare(&net, hankel, sv_tol)
    }

    pub fn from_parts(net: &MlpNetwork, layout: RegressorLayout, h: Matrix, y_f: Matrix, sv_tol: f64) -> Result<Self> {
        if net.input_dim() != layout.dim() || net.output_dim() != layout.output_dim() {
            return Err(Error::Dimension(format!(
                "network maps {} -> {}, layout needs {} -> {}",
                net.input_dim(),
                net.output_dim(),
                layout.dim(),
                layout.output_dim()
            )));
        }
        if h.nrows() != layout.dim() || y_f.nrows() != layout.output_dim() || h.ncols() != y_f.ncols() {
            return Err(Error::Dimension(format!(
                "regressor matrix {}x{} and targets {}x{} do not match the layout",
                h.nrows(),
                h.ncols(),
                y_f.nrows(),
                y_f.ncols()
            )));
        }
        let ndm = neural_data_matrix(net, &h)?;
        let mut net = net.clone();
        let refit = refit_output_layer(&mut net, &ndm, &y_f)?;
        let pinv_aug = pseudo_inverse(&ndm.augmented, sv_tol)?;
        let output_map = &y_f * &pinv_aug;
        let null_basis = nullspace_basis(&ndm.augmented, sv_tol)?;

        let y_sv = singular_values(&y_f)?;
        let rows = y_f.nrows();
        let y_f_min_singular_value = if rows <= y_sv.len() { y_sv[rows - 1] } else { 0.0 };
        let y_f_pinv = if rows <= y_f.ncols() && y_f_min_singular_value > sv_tol * y_sv[0] {
            Some(pseudo_inverse(&y_f, sv_tol)?)
        } else {
            None
        };

        Ok(Self {
            net,
            layout,
            h,
            y_f,
            phi_bar: ndm.phi_bar,
            augmented: ndm.augmented,
            pinv_aug,
            output_map,
            null_basis,
            min_singular_value: ndm.min_singular_value,
            full_row_rank: ndm.full_row_rank,
            y_f_pinv,
            y_f_min_singular_value,
            refit,
            sv_tol,
        })
    }

    /// Width of the neural basis.
    pub fn basis_width(&self) -> usize {
        self.phi_bar.nrows()
    }

    /// Number of data columns `T`.
    pub fn columns(&self) -> usize {
        self.phi_bar.ncols()
    }

    /// `[Phi_bar; 1^T; Y_f]`, the stacked equality matrix acting on `g`.
    pub fn stacked_constraint_matrix(&self) -> Matrix {
        let (a, y) = (self.augmented.nrows(), self.y_f.nrows());
        let mut m = Matrix::zeros(a + y, self.columns());
        m.rows_mut(0, a).copy_from(&self.augmented);
        m.rows_mut(a, y).copy_from(&self.y_f);
        m
    }

    pub fn regressor(&self, u_ini: &[f64], y_ini: &[f64], u_future: &[f64]) -> Result<Vector> {
        self.layout.build(u_ini, y_ini, u_future)
    }

    /// `pinv_aug col(phi, 1)`.
    pub fn g_nls(&self, phi: &Vector) -> Result<Vector> {
        if phi.len() != self.basis_width() {
            return Err(Error::Dimension(format!(
                "hidden vector has {} entries, basis width is {}",
                phi.len(),
                self.basis_width()
            )));
        }
        let l = self.basis_width();
        let mut g = self.pinv_aug.column(l).clone_owned();
        g.gemv(1.0, &self.pinv_aug.columns(0, l), phi, 1.0);
        Ok(g)
    }

    /// Point prediction of the network with the refit output layer.
    pub fn nls_predict(&self, u_nn: &Vector) -> Result<Vector> {
        Ok(self.net.forward(u_nn)?.0)
    }

    /// Member `Y_f (g_nls + g_hat)` of the set-valued prediction.
    pub fn set_valued_member(&self, u_nn: &Vector, g_hat: &Vector) -> Result<Vector> {
        if g_hat.len() != self.columns() {
            return Err(Error::Dimension(format!(
                "g_hat has {} entries, expected {}",
                g_hat.len(),
                self.columns()
            )));
        }
        let g = self.g_nls(&self.net.hidden(u_nn)?)? + g_hat;
        Ok(&self.y_f * g)
    }

    /// Residual of the installed output layer.
    pub fn residual(&self) -> ResidualMatrix {
        let l = self.basis_width();
        let w = self.output_map.columns(0, l).clone_owned();
        let b = self.output_map.column(l).clone_owned();
        residual_matrix(self, &w, &b).expect("output map has context dimensions")
    }

    pub fn dims(&self) -> ContextDims {
        ContextDims {
            m: self.layout.m,
            p: self.layout.p,
            t_ini: self.layout.t_ini,
            horizon: self.layout.horizon,
            basis_width: self.basis_width(),
            columns: self.columns(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ContextDims {
    pub m: usize,
    pub p: usize,
    pub t_ini: usize,
    pub horizon: usize,
    pub basis_width: usize,
    pub columns: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualMatrix {
    pub e: Matrix,
    pub frobenius: f64,
}

/// `E = Y_f - [W_o b_o] [Phi_bar; 1^T]`.
pub fn residual_matrix(ctx: &DeepcContext, w_o: &Matrix, b_o: &Vector) -> Result<ResidualMatrix> {
    let l = ctx.basis_width();
    if w_o.shape() != (ctx.y_f.nrows(), l) || b_o.len() != ctx.y_f.nrows() {
        return Err(Error::Dimension(format!(
            "output layer {}x{} with bias {}, expected {}x{l}",
            w_o.nrows(),
            w_o.ncols(),
            b_o.len(),
            ctx.y_f.nrows()
        )));
    }
    let mut e = &ctx.y_f - w_o * &ctx.phi_bar;
    for mut col in e.column_iter_mut() {
        col -= b_o;
    }
    let frobenius = e.norm();
    Ok(ResidualMatrix { e, frobenius })
}

#[derive(Debug, Clone)]
pub struct EquivalenceCertificate {
    /// `max_v ||E v||_inf` over the orthonormal null-space basis.
    pub value: f64,
    pub tolerance: f64,
    pub equivalent: bool,
    /// Basis column attaining the maximum, if the null space is nontrivial.
    pub worst_direction: Option<Vector>,
    pub residual_frobenius: f64,
    pub min_singular_value: f64,
    pub null_dim: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub residual_frobenius: f64,
    pub certificate: f64,
    pub tolerance: f64,
    pub equivalent: bool,
    pub min_singular_value: f64,
    pub null_dim: usize,
    pub dims: ContextDims,
    pub refit_cost_before: f64,
    pub refit_cost_after: f64,
}

/// Decides whether the set-valued prediction reduces to the point prediction.
///
/// Requires `[Phi_bar; 1^T]` to have full row rank.
pub fn equivalence_certificate(ctx: &DeepcContext, e: &ResidualMatrix, tolerance: f64) -> Result<EquivalenceCertificate> {
    if !ctx.full_row_rank {
        return Err(Error::RankHypothesis(format!(
            "[Phi_bar; 1^T] is {}x{} with smallest singular value {:.3e}; full row rank required",
            ctx.augmented.nrows(),
            ctx.augmented.ncols(),
            ctx.min_singular_value
        )));
    }
    let null_dim = ctx.null_basis.ncols();
    let mut value = 0.0;
    let mut worst = None;
    for j in 0..null_dim {
        let v = ctx.null_basis.column(j);
        let ev = &e.e * v;
        let n = ev.amax();
        if worst.is_none() || n > value {
            value = n;
            worst = Some(j);
        }
    }
    Ok(EquivalenceCertificate {
        value,
        tolerance,
        equivalent: value <= tolerance,
        worst_direction: worst.map(|j| ctx.null_basis.column(j).clone_owned()),
        residual_frobenius: e.frobenius,
        min_singular_value: ctx.min_singular_value,
        null_dim,
    })
}

impl EquivalenceCertificate {
    pub fn report(&self, ctx: &DeepcContext) -> CertificateReport {
        CertificateReport {
            residual_frobenius: self.residual_frobenius,
            certificate: self.value,
            tolerance: self.tolerance,
            equivalent: self.equivalent,
            min_singular_value: self.min_singular_value,
            null_dim: self.null_dim,
            dims: ctx.dims(),
            refit_cost_before: ctx.refit.cost_before,
            refit_cost_after: ctx.refit.cost_after,
        }
    }
}

/// Largest entry of `[Phi_bar; 1^T] g - col(phi, 1)`, for checking set membership.
pub fn interpolation_residual(ctx: &DeepcContext, phi: &Vector, g: &Vector) -> f64 {
    let target = augment(&Matrix::from_column_slice(phi.len(), 1, phi.as_slice()));
    let lhs = &ctx.augmented * g;
    max_abs(&(Matrix::from_column_slice(lhs.len(), 1, lhs.as_slice()) - target))
}

/// Uses the default singular-value cutoff.
pub fn prepare_context(net: &MlpNetwork, hankel: &HankelSet) -> Result<DeepcContext> {
    DeepcContext::prepare(net, hankel, DEFAULT_SV_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::{build_hankel, TrajectoryData};
    use crate::mlp::Activation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Small context: q = 3 regressor rows (m = p = 1, t_ini = 1, horizon = 1), `width`
    /// tanh units, `cols` columns. `exact` makes `Y_f` an affine image of the basis.
    fn synthetic(width: usize, cols: usize, exact: bool, seed: u64) -> DeepcContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = RegressorLayout::new(1, 1, 1, 1).unwrap();
        let net = MlpNetwork::glorot(3, &[width], &[Activation::Tanh], 1, seed).unwrap();
        let h = random(3, cols, &mut rng) * 2.0;
        let y_f = if exact {
            net.forward_batch(&h).unwrap()
        } else {
            random(1, cols, &mut rng)
        };
        DeepcContext::from_parts(&net, layout, h, y_f, DEFAULT_SV_TOL).unwrap()
    }

    #[test]
    fn square_augmented_matrix_gives_unique_solution() {
        let ctx = synthetic(3, 4, false, 1);
        assert!(ctx.full_row_rank);
        assert_eq!(ctx.null_basis.ncols(), 0);
        let phi = Vector::from_vec(vec![0.1, -0.2, 0.3]);
        let g = ctx.g_nls(&phi).unwrap();
        assert!(interpolation_residual(&ctx, &phi, &g) < 1e-10);
        let direct = ctx.augmented.clone().lu().solve(&Vector::from_vec(vec![0.1, -0.2, 0.3, 1.0])).unwrap();
        assert!((g - direct).amax() < 1e-10);
    }

    #[test]
    fn data_column_reproduces_refit_prediction() {
        let ctx = synthetic(4, 20, false, 2);
        let j = 7;
        let phi = ctx.phi_bar.column(j).clone_owned();
        let pred = &ctx.y_f * ctx.g_nls(&phi).unwrap();
        let net_pred = ctx.nls_predict(&ctx.h.column(j).clone_owned()).unwrap();
        assert!((pred - net_pred).amax() < 1e-10);
    }

    #[test]
    fn zero_hidden_vector_picks_last_pinv_column() {
        let ctx = synthetic(4, 20, false, 3);
        let g = ctx.g_nls(&Vector::zeros(4)).unwrap();
        assert_eq!(g, ctx.pinv_aug.column(4).clone_owned());
    }

    #[test]
    fn exact_interpolation_has_zero_residual() {
        let ctx = synthetic(3, 4, false, 4);
        assert!(ctx.residual().frobenius < 1e-10);
    }

    #[test]
    fn affine_targets_give_zero_residual() {
        let ctx = synthetic(4, 30, true, 5);
        assert!(ctx.residual().frobenius < 1e-8);
    }

    #[test]
    fn residual_is_orthogonal_to_row_space() {
        let ctx = synthetic(4, 30, false, 6);
        let r = ctx.residual();
        assert!(r.frobenius > 1e-3);
        assert!(max_abs(&(&r.e * ctx.augmented.transpose())) < 1e-8);
    }

    #[test]
    fn certificate_zero_residual() {
        let ctx = synthetic(4, 30, true, 7);
        let c = equivalence_certificate(&ctx, &ctx.residual(), DEFAULT_EQUIVALENCE_TOL).unwrap();
        assert!(c.equivalent && c.value < 1e-8);
    }

    #[test]
    fn certificate_with_empty_null_space() {
        let ctx = synthetic(3, 4, false, 8);
        let c = equivalence_certificate(&ctx, &ctx.residual(), DEFAULT_EQUIVALENCE_TOL).unwrap();
        assert_eq!(c.null_dim, 0);
        assert_eq!(c.value, 0.0);
        assert!(c.equivalent && c.worst_direction.is_none());
    }

    #[test]
    fn certificate_exhibits_violating_direction() {
        let ctx = synthetic(4, 30, false, 9);
        let c = equivalence_certificate(&ctx, &ctx.residual(), DEFAULT_EQUIVALENCE_TOL).unwrap();
        assert!(!c.equivalent);
        let v = c.worst_direction.unwrap();
        let u = ctx.h.column(0).clone_owned();
        let phi = ctx.net.hidden(&u).unwrap();
        let g = ctx.g_nls(&phi).unwrap() + &v;
        assert!(interpolation_residual(&ctx, &phi, &g) < 1e-8);
        let gap = (ctx.set_valued_member(&u, &v).unwrap() - ctx.nls_predict(&u).unwrap()).amax();
        assert!(gap > c.tolerance);
        assert!((gap - c.value).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_violates_hypothesis() {
        // more basis functions than columns
        let ctx = synthetic(6, 5, false, 10);
        assert!(!ctx.full_row_rank);
        let err = equivalence_certificate(&ctx, &ctx.residual(), DEFAULT_EQUIVALENCE_TOL).unwrap_err();
        assert!(matches!(err, Error::RankHypothesis(_)));
    }

    #[test]
    fn linear_mode_uses_raw_hankel_data() {
        let u: Vec<f64> = (0..40).map(|k| ((k * k) as f64 * 0.31).sin()).collect();
        let y: Vec<f64> = (0..40).map(|k| ((k as f64) * 0.7).cos()).collect();
        let hs = build_hankel(&TrajectoryData::from_siso(&u, &y).unwrap(), 2, 3).unwrap();
        let ctx = DeepcContext::linear(&hs, DEFAULT_SV_TOL).unwrap();
        assert_eq!(ctx.phi_bar, hs.h);
        let stacked = ctx.stacked_constraint_matrix();
        let mut expected = Matrix::from_element(hs.h.nrows() + 1 + hs.y_f.nrows(), hs.columns(), 1.0);
        expected.rows_mut(0, 2).copy_from(&hs.u_p);
        expected.rows_mut(2, 2).copy_from(&hs.y_p);
        expected.rows_mut(4, 3).copy_from(&hs.u_f);
        expected.rows_mut(8, 3).copy_from(&hs.y_f);
        assert_eq!(stacked, expected);
    }

    #[test]
    fn report_serializes() {
        let ctx = synthetic(4, 30, true, 11);
        let c = equivalence_certificate(&ctx, &ctx.residual(), DEFAULT_EQUIVALENCE_TOL).unwrap();
        let text = serde_json::to_string(&c.report(&ctx)).unwrap();
        assert!(text.contains("\"equivalent\":true"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn null_space_members_interpolate(seed in 0u64..500, coef in prop::collection::vec(-3.0f64..3.0, 25)) {
            let ctx = synthetic(4, 30, false, seed);
            let g_hat = &ctx.null_basis * Vector::from_vec(coef);
            let u = ctx.h.column(3).clone_owned() * 0.5;
            let phi = ctx.net.hidden(&u).unwrap();
            let g = ctx.g_nls(&phi).unwrap() + &g_hat;
            prop_assert!(interpolation_residual(&ctx, &phi, &g) < 1e-8);
            let r = ctx.residual();
            prop_assert!((&ctx.y_f * &g_hat - &r.e * &g_hat).amax() < 1e-8);
        }

        #[test]
        fn equivalent_context_collapses_set(seed in 0u64..500) {
            let ctx = synthetic(4, 30, true, seed);
            let c = equivalence_certificate(&ctx, &ctx.residual(), DEFAULT_EQUIVALENCE_TOL).unwrap();
            prop_assert!(c.equivalent);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let g_hat = &ctx.null_basis * Vector::from_fn(ctx.null_basis.ncols(), |_, _| rng.random_range(-1.0..1.0));
                let u = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let gap = (ctx.set_valued_member(&u, &g_hat).unwrap() - ctx.nls_predict(&u).unwrap()).amax();
                prop_assert!(gap < 1e-8);
            }
        }

        #[test]
        fn nls_prediction_matches_interpolation(seed in 0u64..500) {
            let ctx = synthetic(5, 40, false, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let u = Vector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let phi = ctx.net.hidden(&u).unwrap();
            let via_data = &ctx.y_f * ctx.g_nls(&phi).unwrap();
            prop_assert!((via_data - ctx.nls_predict(&u).unwrap()).amax() < 1e-8);
        }
    }
}
