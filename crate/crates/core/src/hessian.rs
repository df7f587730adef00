//! Layer Hessian built from calibration activations, with its inverse, its Cholesky
//! factor, and the rank-|Q| inverse downdate that removes quantized columns.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure, Error, Result};
use crate::tensorio::CalibrationBatch;

pub const DEFAULT_DAMPING: f64 = 0.01;

/// Submatrices of the inverse with a larger condition number are rejected.
pub const MAX_GROUP_CONDITION: f64 = 1e12;

const SYMMETRY_TOL: f64 = 1e-12;

/// `H_raw = (2/S) * sum_s x_s x_s^T`, the Hessian of `||(W - W_hat) X||^2` per row.
pub fn accumulate_hessian(batch: &CalibrationBatch) -> DMatrix<f64> {
    let x = batch.samples();
    let scale = 2.0 / batch.len() as f64;
    let mut h = x.tr_mul(x);
    h *= scale;
    symmetrize(&mut h);
    h
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let m = h.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}

/// An ordered set of distinct column indices, the `Q` of a group update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSelector {
    indices: Vec<usize>,
    dim: usize,
}

impl GroupSelector {
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self> {
        ensure!(!indices.is_empty(), Validation, "group selector is empty");
        ensure!(
            indices.windows(2).all(|w| w[0] < w[1]),
            Validation,
            "group indices must be strictly increasing: {indices:?}"
        );
        ensure!(
            *indices.last().unwrap() < dim,
            Validation,
            "group index {} out of range for dimension {dim}",
            indices.last().unwrap()
        );
        Ok(Self { indices, dim })
    }

    /// `width` consecutive columns starting at `start`.
    pub fn contiguous(start: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new((start..start + width).collect(), dim)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Damped Hessian `H`, its inverse, and lower Cholesky factor `U` with `H = U U^T`.
///
/// `H` and `U` are never modified after [`HessianState::finalize`]; only the inverse is
/// downdated as groups are eliminated. Rows and columns of eliminated indices in the
/// inverse are held at exactly zero.
#[derive(Debug, Clone)]
pub struct HessianState {
    h: DMatrix<f64>,
    hinv: DMatrix<f64>,
    chol: DMatrix<f64>,
    eliminated: Vec<bool>,
}

impl HessianState {
    /// Add `damping_rel * mean(diag(H_raw))` to the diagonal (or `damping_rel` when the
    /// diagonal mean is zero) and factorize.
    pub fn finalize(h_raw: DMatrix<f64>, damping_rel: f64) -> Result<Self> {
        ensure!(h_raw.is_square(), Validation, "Hessian must be square");
        ensure!(
            h_raw.nrows() >= 1,
            Validation,
            "Hessian must be at least 1x1"
        );
        ensure!(
            damping_rel > 0.0 && damping_rel.is_finite(),
            Validation,
            "damping must be positive and finite, got {damping_rel}"
        );
        ensure!(
            h_raw.iter().all(|v| v.is_finite()),
            Validation,
            "Hessian contains non-finite values"
        );
        let m = h_raw.nrows();
        let scale = h_raw.amax().max(f64::MIN_POSITIVE);
        for i in 0..m {
            for j in (i + 1)..m {
                let gap = (h_raw[(i, j)] - h_raw[(j, i)]).abs();
                ensure!(
                    gap <= SYMMETRY_TOL * scale,
                    Validation,
                    "Hessian is not symmetric at ({i}, {j}): gap {gap:e}"
                );
            }
        }

        let mean_diag = h_raw.diagonal().mean();
        let shift = if mean_diag > 0.0 {
            damping_rel * mean_diag
        } else {
            damping_rel
        };
        let mut h = h_raw;
        symmetrize(&mut h);
        for i in 0..m {
            h[(i, i)] += shift;
        }

        let chol = match h.clone().cholesky() {
            Some(c) => c,
            None => {
                let min_eig = SymmetricEigen::new(h.clone()).eigenvalues.min();
                return Err(Error::Numerical(format!(
                    "Cholesky factorization failed after damping; smallest eigenvalue ~ {min_eig:e}"
                )));
            }
        };
        let mut hinv = chol.inverse();
        symmetrize(&mut hinv);
        Ok(Self {
            chol: chol.l(),
            h,
            hinv,
            eliminated: vec![false; m],
        })
    }

    pub fn from_batch(batch: &CalibrationBatch, damping_rel: f64) -> Result<Self> {
        Self::finalize(accumulate_hessian(batch), damping_rel)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// The damped Hessian.
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Current (possibly downdated) inverse.
    pub fn hinv(&self) -> &DMatrix<f64> {
        &self.hinv
    }

    /// Lower-triangular `U` with `H = U U^T`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn is_eliminated(&self, index: usize) -> bool {
        self.eliminated[index]
    }

    pub fn eliminated_count(&self) -> usize {
        self.eliminated.iter().filter(|&&e| e).count()
    }

    pub fn surviving(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.eliminated[i]).collect()
    }

    fn check_selector(&self, q: &GroupSelector) -> Result<()> {
        ensure!(
            q.dim() == self.dim(),
            Validation,
            "selector dimension {} does not match Hessian dimension {}",
            q.dim(),
            self.dim()
        );
        if let Some(&i) = q.indices().iter().find(|&&i| self.eliminated[i]) {
            return Err(Error::Validation(format!(
                "column {i} was already eliminated"
            )));
        }
        Ok(())
    }

    fn qq_block(&self, q: &GroupSelector) -> DMatrix<f64> {
        let idx = q.indices();
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.hinv[(idx[a], idx[b])])
    }

    /// `([H^-1]_QQ)^-1`, the metric that weighs a group's quantization error.
    pub fn group_metric(&self, q: &GroupSelector) -> Result<DMatrix<f64>> {
        self.check_selector(q)?;
        invert_spd_checked(self.qq_block(q))
    }

    /// Remove the columns `Q` from the inverse:
    /// `H^-1 <- H^-1 - H^-1[:,Q] ([H^-1]_QQ)^-1 H^-1[Q,:]`.
    ///
    /// Afterwards the surviving principal block equals the inverse of `H` restricted to
    /// the surviving indices.
    pub fn eliminate_group(&mut self, q: &GroupSelector) -> Result<()> {
        let metric = self.group_metric(q)?;
        let idx = q.indices();
        let m = self.dim();
        // H^-1[:, Q], an M x |Q| panel.
        let panel = DMatrix::from_fn(m, idx.len(), |i, b| self.hinv[(i, idx[b])]);
        let update = &panel * &metric * panel.transpose();
        self.hinv -= update;
        for &i in idx {
            self.hinv.row_mut(i).fill(0.0);
            self.hinv.column_mut(i).fill(0.0);
            self.eliminated[i] = true;
        }
        symmetrize(&mut self.hinv);
        Ok(())
    }
}

/// Invert a small SPD block after checking its conditioning.
fn invert_spd_checked(block: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(block.clone());
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo.is_nan() || lo <= 0.0 || hi / lo > MAX_GROUP_CONDITION {
        return Err(Error::Numerical(format!(
            "inverse-Hessian block is singular or ill-conditioned (eigenvalues in [{lo:e}, {hi:e}])"
        )));
    }
    let chol = block.cholesky().ok_or_else(|| {
        Error::Numerical("inverse-Hessian block failed Cholesky factorization".into())
    })?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}
