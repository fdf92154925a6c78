//! Dense `f64` linear algebra: the matrix type and the factorizations every
//! integrator step relies on.

mod matrix;
mod qr;
mod svd;

pub use matrix::{frobenius_norm, Matrix};
pub use qr::{householder_qr, ortho_augment, QrResult, DEPENDENCY_TOL};
pub use svd::{svd_thin, SvdResult};
