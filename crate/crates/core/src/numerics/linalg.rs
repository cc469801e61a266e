//! Dense linear-algebra helpers on 2-D [`Tensor`]s.

use nalgebra::DMatrix;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative cutoff below which singular values are treated as zero.
pub const DEFAULT_RCOND: f64 = 1e-12;

pub fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    match t.shape() {
        [m, n] => Ok(DMatrix::from_row_slice(*m, *n, t.data())),
        other => Err(Error::shape("to_matrix", other, &[2])),
    }
}

pub fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect();
    Tensor::new(&[r, c], data).expect("row-major copy matches shape")
}

/// Moore–Penrose pseudo-inverse via SVD. Singular values below
/// `rcond · σ_max` are truncated.
pub fn pinv(m: &Tensor, rcond: f64) -> Result<Tensor> {
    if rcond < 0.0 {
        return Err(Error::Numerical(format!("rcond must be >= 0, got {rcond}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "pinv" });
    }
    let mat = to_matrix(m)?;
    Ok(from_matrix(&pinv_matrix(&mat, rcond)?))
}

pub(crate) fn pinv_matrix(mat: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let (rows, cols) = mat.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = mat
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        // V Σ⁺ Uᵀ, one rank-one term per retained singular value.
        let vi = v_t.row(i).transpose();
        let ui = u.column(i);
        out += (vi * ui.transpose()) / s;
    }
    Ok(out)
}
