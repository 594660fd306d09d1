use crate::error::{Error, Result};
use crate::numerics::Matrix;
use nalgebra::DMatrix;

const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITER: usize = 10_000;

/// Best rank-`r` factorisation of `w1 · w2` as `(U_r Σ_r^½, Σ_r^½ V_rᵀ)`.
/// Comparison baseline only.
pub fn tsvd_reference(w1: &Matrix, w2: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    if r == 0 || r > w1.cols() {
        return Err(Error::Config(format!(
            "truncation rank {r} outside 1..={}",
            w1.cols()
        )));
    }
    let p = w1.matmul(w2)?;
    let dense = DMatrix::from_row_slice(p.rows(), p.cols(), p.data());
    let svd = dense
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::SvdNoConvergence)?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::SvdNoConvergence),
    };
    let r = r.min(svd.singular_values.len());
    let mut left = Matrix::zeros(p.rows(), r);
    let mut right = Matrix::zeros(r, p.cols());
    for k in 0..r {
        let s = svd.singular_values[k].sqrt();
        for i in 0..p.rows() {
            left.set(i, k, u[(i, k)] * s);
        }
        for j in 0..p.cols() {
            right.set(k, j, vt[(k, j)] * s);
        }
    }
    Ok((left, right))
}
