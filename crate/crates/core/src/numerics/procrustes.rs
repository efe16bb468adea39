use super::decomp::svd;
use super::matrix::Matrix;
use crate::error::{invalid, Result};

/// Orthogonal matrix `R` minimizing `‖u − v·R‖_F`.
///
/// With `vᵀu = P·S·Qᵀ` the minimizer is `R = P·Qᵀ`.
pub fn procrustes_rotation(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    if u.shape() != v.shape() {
        return invalid(format!(
            "procrustes shape mismatch: {:?} vs {:?}",
            u.shape(),
            v.shape()
        ));
    }
    let cross = v.t_matmul(u);
    let dec = svd(&cross)?;
    Ok(dec.u.matmul_t(&dec.v))
}

/// `min_{RᵀR = I} ‖u − v·R‖_F`
pub fn procrustes_distance(u: &Matrix, v: &Matrix) -> Result<f64> {
    let r = procrustes_rotation(u, v)?;
    Ok(u.sub(&v.matmul(&r)).frobenius_norm())
}
