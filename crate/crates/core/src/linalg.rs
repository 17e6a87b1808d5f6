//! Small dense linear-algebra helpers built on `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter ladder for Cholesky retries: 1e-10, 1e-9, ..., 1e-4 of
/// the mean diagonal.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factorisation together with the diagonal jitter that was
/// needed to obtain it (zero when the matrix factored cleanly).
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl SpdFactor {
    /// Factor `m`, escalating diagonal jitter on failure.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("matrix has non-finite entries".into()));
        }
        if let Some(chol) = Cholesky::new(symmetrize(m)) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let n = m.nrows();
        let mean_diag = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n.max(1) as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-12) {
            let jitter = rel * scale;
            let mut shifted = symmetrize(m);
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::NumericalFailure(format!(
            "matrix is not positive definite (jitter up to {:.0e} of the mean diagonal)",
            JITTER_MAX
        )))
    }

    /// Strict factorisation: no jitter allowed.
    pub fn strict(m: &DMatrix<f64>) -> Option<Self> {
        if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Cholesky::new(symmetrize(m)).map(|chol| Self { chol, jitter: 0.0 })
    }

    /// `log |m|` from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Symmetrised inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Max absolute asymmetry relative to the largest entry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() / scale
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol
}

/// `log |m|` of a symmetric positive-definite matrix; `None` if it does not
/// factor without jitter.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    SpdFactor::strict(m).map(|f| f.log_det())
}

/// `vᵀ M v`.
pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    a.component_mul(&b.transpose()).sum()
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}
