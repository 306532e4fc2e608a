//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! All factorizations used by the filters go through this module so that
//! tests can count them (`fact_counts`), which is how the per-update solve
//! budget of the variance-inflated filter is asserted.

use std::cell::RefCell;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

thread_local! {
    static FACT_COUNTS: RefCell<Option<BTreeMap<usize, usize>>> = const { RefCell::new(None) };
}

/// Start recording factorization sizes on this thread.
pub fn start_fact_counting() {
    FACT_COUNTS.with(|c| *c.borrow_mut() = Some(BTreeMap::new()));
}

/// Stop recording and return `size -> number of factorizations`.
pub fn take_fact_counts() -> BTreeMap<usize, usize> {
    FACT_COUNTS.with(|c| c.borrow_mut().take().unwrap_or_default())
}

fn record_fact(size: usize) {
    FACT_COUNTS.with(|c| {
        if let Some(map) = c.borrow_mut().as_mut() {
            *map.entry(size).or_insert(0) += 1;
        }
    });
}

/// `(a + a^T) / 2`, used after every covariance assembly to suppress
/// asymmetry drift.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// A factored symmetric positive-definite or general square matrix,
/// usable for repeated solves against the same left-hand side.
pub enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    /// Cholesky-factorize an SPD matrix. Fails with a condition diagnostic
    /// when the matrix is not positive definite.
    pub fn spd(a: DMatrix<f64>, context: &'static str) -> Result<Self> {
        let size = a.nrows();
        let diag_max = a.diagonal().amax();
        match a.cholesky() {
            Some(c) => {
                record_fact(size);
                Ok(Factor::Chol(c))
            }
            None => Err(Error::numerical(
                context,
                format!("matrix of size {size} not positive definite (max diagonal {diag_max:.3e})"),
            )),
        }
    }

    /// LU-factorize a general square matrix.
    pub fn lu(a: DMatrix<f64>, context: &'static str) -> Result<Self> {
        let size = a.nrows();
        let lu = a.lu();
        if lu.determinant().abs() == 0.0 {
            return Err(Error::numerical(context, format!("matrix of size {size} is singular")));
        }
        record_fact(size);
        Ok(Factor::Lu(lu))
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
        match self {
            Factor::Chol(c) => Ok(c.solve(b)),
            Factor::Lu(lu) => lu
                .solve(b)
                .ok_or_else(|| Error::numerical(context, "LU solve failed".to_string())),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
        match self {
            Factor::Chol(c) => Ok(c.solve(b)),
            Factor::Lu(lu) => lu
                .solve(b)
                .ok_or_else(|| Error::numerical(context, "LU solve failed".to_string())),
        }
    }

    /// Explicit inverse via `solve(I)`.
    pub fn inverse(&self, size: usize, context: &'static str) -> Result<DMatrix<f64>> {
        self.solve_mat(&DMatrix::identity(size, size), context)
    }
}

/// Check that a symmetric matrix is PSD up to `tol` on its eigenvalues.
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    let sym = symmetrize(a);
    sym.symmetric_eigen().eigenvalues.iter().all(|&ev| ev >= -tol)
}

/// Largest absolute element, as a cheap matrix magnitude for relative checks.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()))
}
