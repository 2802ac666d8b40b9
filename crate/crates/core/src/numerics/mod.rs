//! Dense linear algebra and the constrained NLP solver shared by all controllers.

pub mod linalg;
pub mod nlp;
mod qp;

pub use linalg::{
    max_abs, nullspace_basis, orthonormal_complement, pseudo_inverse, rank, singular_values,
    Matrix, Vector, DEFAULT_SV_TOL,
};
pub use nlp::{
    solve_nlp, Derivatives, Evaluation, HessianInit, NlpProblem, NlpSolution, SqpOptions,
    SqpStatus,
};
