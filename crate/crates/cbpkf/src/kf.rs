//! Baseline Kalman filter: time update and Joseph-form measurement update.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Factor};
use crate::model::{EstimateKind, StateEstimate, SystemModel};

/// Time update: propagate a posterior through the dynamics.
///
/// `mean' = Phi mean`, `cov' = Phi cov Phi^T + Q`.
pub fn kf_predict(post: &StateEstimate, model: &SystemModel) -> Result<StateEstimate> {
    if post.kind != EstimateKind::Posterior {
        return Err(Error::Config("kf_predict expects a posterior estimate".into()));
    }
    if post.dim() != model.state_dim() {
        return Err(Error::dim("kf_predict", format!("state dim {}", model.state_dim()), format!("{}", post.dim())));
    }
    let mean = &model.phi * &post.mean;
    let cov = symmetrize(&(&model.phi * &post.cov * model.phi.transpose() + &model.q));
    StateEstimate::new(mean, cov, EstimateKind::Prior, post.step + 1)
}

/// Measurement update with the Joseph-form covariance:
///
/// `K = Sigma H^T (H Sigma H^T + R)^{-1}`
/// `cov' = (I - KH) Sigma (I - KH)^T + K R K^T`
///
/// The innovation matrix is factorized (Cholesky); no explicit inverse.
pub fn kf_update(prior: &StateEstimate, z: &DVector<f64>, model: &SystemModel) -> Result<StateEstimate> {
    if prior.kind != EstimateKind::Prior {
        return Err(Error::Config("kf_update expects a prior estimate".into()));
    }
    let (est, _) = kf_update_with_gain(prior, z, model)?;
    Ok(est)
}

/// As `kf_update`, also returning the gain (m x n).
pub fn kf_update_with_gain(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
) -> Result<(StateEstimate, DMatrix<f64>)> {
    let m = model.state_dim();
    let n = model.obs_dim();
    if prior.dim() != m {
        return Err(Error::dim("kf_update", format!("state dim {m}"), format!("{}", prior.dim())));
    }
    if z.len() != n {
        return Err(Error::dim("kf_update", format!("obs dim {n}"), format!("{}", z.len())));
    }

    let h_sigma = &model.h * &prior.cov; // n x m
    let innovation_cov = symmetrize(&(&h_sigma * model.h.transpose() + &model.r));
    let s = Factor::spd(innovation_cov, "kf_update innovation covariance")?;
    // K^T = S^{-1} H Sigma
    let gain = s.solve_mat(&h_sigma, "kf_update gain")?.transpose(); // m x n

    let innovation = z - &model.h * &prior.mean;
    let mean = &prior.mean + &gain * innovation;

    let i_kh = DMatrix::identity(m, m) - &gain * &model.h;
    let cov = symmetrize(&(&i_kh * &prior.cov * i_kh.transpose() + &gain * &model.r * gain.transpose()));

    Ok((
        StateEstimate::new(mean, cov, EstimateKind::Posterior, prior.step)?,
        gain,
    ))
}
