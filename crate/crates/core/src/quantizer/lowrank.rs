use nalgebra::DMatrix;

use crate::error::{ensure, Error, Result};
use crate::hessian::HessianState;

/// Rank-`r` factors `A (N x r)`, `B (r x M)` minimizing `||(R - A B) U||_F^2` with
/// `R = W - W_hat` and `H = U U^T`.
///
/// With the SVD `R U = u D v`, `A = u_r D_r` and `B = v_r U^-1`, so that
/// `A B U` is the rank-`r` truncation of `R U` and the remaining weighted error is the
/// sum of the discarded squared singular values.
pub fn residual_lowrank(
    w: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    hess: &HessianState,
    rank: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = w.shape();
    ensure!(
        w_hat.shape() == (n, m),
        Validation,
        "reconstruction shape {:?} differs from weight shape {:?}",
        w_hat.shape(),
        (n, m)
    );
    ensure!(
        hess.dim() == m,
        Validation,
        "Hessian dimension {} does not match {m} columns",
        hess.dim()
    );
    ensure!(
        rank <= n.min(m),
        Validation,
        "low-rank rank {rank} exceeds min({n}, {m})"
    );
    if rank == 0 {
        return Ok((DMatrix::zeros(n, 0), DMatrix::zeros(0, m)));
    }

    let u_factor = hess.cholesky_factor();
    let weighted = (w - w_hat) * u_factor;
    let svd = weighted
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD of the weighted residual did not converge".into()))?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numerical("SVD returned no singular vectors".into())),
    };
    let sigma = svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut a = DMatrix::zeros(n, rank);
    let mut v_r = DMatrix::zeros(rank, m);
    for (slot, &i) in order.iter().take(rank).enumerate() {
        a.set_column(slot, &(u.column(i) * sigma[i]));
        v_r.set_row(slot, &v_t.row(i));
    }
    // B = v_r U^-1, i.e. U^T B^T = v_r^T with U^T upper triangular.
    let b_t = u_factor
        .transpose()
        .solve_upper_triangular(&v_r.transpose())
        .ok_or_else(|| Error::Numerical("Cholesky factor is singular".into()))?;
    Ok((a, b_t.transpose()))
}

/// Rank used when a low-rank correction is requested without an explicit value.
pub fn default_rank(rows: usize, cols: usize) -> usize {
    rows.min(cols).div_ceil(100)
}
