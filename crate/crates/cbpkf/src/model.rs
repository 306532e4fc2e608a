//! Linear-Gaussian model and state-estimate types shared by all filters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// One time step of the linear dynamical + observation model:
///
/// `X_k = Phi X_{k-1} + W`,  `W ~ N(0, Q)`
/// `Z_k = H X_k + V`,        `V ~ N(0, R)`
#[derive(Debug, Clone)]
pub struct SystemModel {
    /// State-transition matrix (m x m).
    pub phi: DMatrix<f64>,
    /// Model-error covariance (m x m).
    pub q: DMatrix<f64>,
    /// Observation matrix (n x m).
    pub h: DMatrix<f64>,
    /// Observation-error covariance (n x n).
    pub r: DMatrix<f64>,
}

impl SystemModel {
    /// Validate mutual dimensional consistency. Positive definiteness of `r`
    /// is not checked here; the filters report it at the point of failure.
    pub fn new(phi: DMatrix<f64>, q: DMatrix<f64>, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let m = phi.nrows();
        if phi.ncols() != m || m == 0 {
            return Err(Error::dim("SystemModel::phi", "square, m >= 1", format!("{}x{}", phi.nrows(), phi.ncols())));
        }
        if q.nrows() != m || q.ncols() != m {
            return Err(Error::dim("SystemModel::q", format!("{m}x{m}"), format!("{}x{}", q.nrows(), q.ncols())));
        }
        let n = h.nrows();
        if n == 0 || h.ncols() != m {
            return Err(Error::dim("SystemModel::h", format!("n x {m}, n >= 1"), format!("{}x{}", h.nrows(), h.ncols())));
        }
        if r.nrows() != n || r.ncols() != n {
            return Err(Error::dim("SystemModel::r", format!("{n}x{n}"), format!("{}x{}", r.nrows(), r.ncols())));
        }
        Ok(Self { phi, q, h, r })
    }

    /// State dimension m.
    pub fn state_dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Observation dimension n.
    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Whether an estimate is a forecast (before assimilating `Z_k`) or filtered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateKind {
    Prior,
    Posterior,
}

/// State mean with its error covariance at one time step.
#[derive(Debug, Clone)]
pub struct StateEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub kind: EstimateKind,
    pub step: usize,
}

impl StateEstimate {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, kind: EstimateKind, step: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim(
                "StateEstimate::cov",
                format!("{0}x{0}", mean.len()),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        Ok(Self { mean, cov, kind, step })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Check the covariance invariants: symmetry within 1e-10 relative and
    /// eigenvalues above `-1e-10 * trace`.
    pub fn check_cov(&self) -> Result<()> {
        let scale = crate::linalg::max_abs(&self.cov).max(f64::MIN_POSITIVE);
        let asym = crate::linalg::max_abs(&(&self.cov - self.cov.transpose()));
        if asym > 1e-10 * scale {
            return Err(Error::numerical("StateEstimate::check_cov", format!("asymmetry {asym:.3e} exceeds 1e-10 relative")));
        }
        let tol = 1e-10 * self.cov.trace().abs();
        if !crate::linalg::is_psd(&self.cov, tol) {
            return Err(Error::numerical("StateEstimate::check_cov", "covariance has eigenvalue below -1e-10 * trace".to_string()));
        }
        Ok(())
    }

    /// Replace the covariance by its symmetric part.
    pub fn symmetrized(mut self) -> Self {
        self.cov = symmetrize(&self.cov);
        self
    }
}
