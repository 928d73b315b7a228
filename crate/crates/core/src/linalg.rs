//! Small dense solves for the final-stage regressions.

use nalgebra::{DMatrix, DVector};

/// Inverse of a symmetric positive-definite matrix, `None` when singular.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Least squares `argmin_b |y - Z b|^2` with its HC0 sandwich covariance
/// `(Z'Z)^-1 (sum e_i^2 z_i z_i') (Z'Z)^-1`.
pub(crate) fn ols_hc0(z: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let gram = z.transpose() * z;
    let bread = spd_inverse(&gram)?;
    let beta = &bread * (z.transpose() * y);
    let resid = y - z * &beta;
    let p = z.ncols();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for (i, row) in z.row_iter().enumerate() {
        let e2 = resid[i] * resid[i];
        for a in 0..p {
            for b in 0..p {
                meat[(a, b)] += e2 * row[a] * row[b];
            }
        }
    }
    Some((beta, &bread * meat * &bread))
}
