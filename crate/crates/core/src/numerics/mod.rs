//! Self-contained dense linear algebra used across the crate.

mod decomp;
mod matrix;
mod procrustes;
mod rng;

pub use decomp::{
    frobenius_norm, inverse, operator_norm, psd_sqrt, qr_orthonormal, solve, svd,
    symmetric_eigen, SvdResult,
};
pub use matrix::{axpy, dot, norm2, Matrix};
pub use procrustes::{procrustes_distance, procrustes_rotation};
pub use rng::{gaussian_matrix, SeededRng};
