//! When Y_f is an exact affine image of the hidden features, moving g along the null
//! space of [Phi_bar; 1^T] leaves the prediction unchanged. Perturbing Y_f along that
//! null space breaks this, and the certificate exhibits the offending direction.

use nalgebra::{DMatrix, DVector};
use neural_deepc::hankel::RegressorLayout;
use neural_deepc::mlp::{Activation, MlpNetwork};
use neural_deepc::predictors::{equivalence_certificate, DeepcContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> neural_deepc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = RegressorLayout::new(1, 1, 2, 3)?;
    let t = 30;
    let h = DMatrix::from_fn(layout.dim(), t, |_, _| rng.random_range(-2.0..2.0));
    let net = MlpNetwork::glorot(layout.dim(), &[5], &[Activation::Tanh], layout.output_dim(), 0)?;
    let phi = net.hidden_batch(&h)?;
    let w = DMatrix::from_fn(layout.output_dim(), phi.nrows(), |_, _| rng.random_range(-1.0..1.0));
    let y_f = &w * &phi;

    let exact = DeepcContext::from_parts(&net, layout, h.clone(), y_f.clone(), 1e-10)?;
    let cert = equivalence_certificate(&exact, &exact.residual(), 1e-8)?;
    println!("exact data:     certificate {:.3e}, equivalent {}", cert.value, cert.equivalent);

    let mut y_bad = y_f;
    let v = exact.null_basis.column(0).clone_owned();
    for j in 0..t {
        y_bad[(1, j)] += v[j];
    }
    let bad = DeepcContext::from_parts(&net, layout, h, y_bad, 1e-10)?;
    let cert = equivalence_certificate(&bad, &bad.residual(), 1e-8)?;
    println!("perturbed data: certificate {:.3e}, equivalent {}", cert.value, cert.equivalent);

    let u_nn = DVector::from_fn(layout.dim(), |_, _| rng.random_range(-1.0..1.0));
    if let Some(g_hat) = cert.worst_direction {
        let moved = bad.set_valued_member(&u_nn, &g_hat)?;
        let base = bad.nls_predict(&u_nn)?;
        println!("prediction moved by {:.3e} along the exhibited direction", (moved - base).amax());
    }
    Ok(())
}
