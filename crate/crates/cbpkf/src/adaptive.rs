//! Time-varying CB-penalty weight.
//!
//! The penalty weight for step k is proportional to the magnitude of the
//! best available guess of the state, `alpha_k = gamma * ||x||`, so the
//! penalty engages in extreme conditions and vanishes near the median.
//! The reference state is either the plain Kalman posterior for the step
//! (operational mode) or the true state (oracle mode, an upper bound on
//! achievable performance).

use nalgebra::{DMatrix, DVector};

use crate::cbpkf::{cbpkf_update_cached, compute_g2t, CbPenaltyConfig};
use crate::error::{Error, Result};
use crate::kf::kf_update;
use crate::model::{StateEstimate, SystemModel};
use crate::vikf::{vikf_update, VikfConfig};

/// Source of the reference state for the per-step weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Weight from the plain Kalman posterior of the current step.
    KfEstimate,
    /// Weight from the true state (feasibility bound; the truth reaches the
    /// filter only through the scalar weight).
    TruthOracle,
}

/// Adaptive weight policy.
#[derive(Debug, Clone)]
pub struct AdaptiveConfig {
    /// Proportionality constant (1 / state units).
    pub gamma: f64,
    pub mode: AlphaMode,
    /// Upper cap on the produced weight.
    pub alpha_cap: f64,
}

impl AdaptiveConfig {
    pub fn new(gamma: f64, mode: AlphaMode) -> Self {
        Self {
            gamma,
            mode,
            alpha_cap: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha_cap <= 0.0 {
            return Err(Error::Config(format!("alpha_cap must be > 0, got {}", self.alpha_cap)));
        }
        Ok(())
    }
}

/// Which CB-penalized update the adaptive weight drives.
#[derive(Debug, Clone)]
pub enum CbEngine {
    Cbpkf(CbPenaltyConfig),
    Vikf(VikfConfig),
}

/// `alpha_k = min(gamma * ||x||, alpha_cap)`; the norm is Euclidean, which
/// is `|x|` in the scalar case.
pub fn alpha_for_step(ref_state: &DVector<f64>, cfg: &AdaptiveConfig) -> f64 {
    (cfg.gamma * ref_state.norm()).min(cfg.alpha_cap)
}

/// One adaptively weighted step. Computes the reference state per
/// `cfg.mode`, derives `alpha_k`, and runs the selected CB-penalized update
/// on the original prior (the Kalman posterior used to set the weight is
/// discarded). Returns the posterior and the weight before any internal
/// reductions.
pub fn adaptive_filter_step(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
    cfg: &AdaptiveConfig,
    engine: &CbEngine,
    truth: Option<&DVector<f64>>,
) -> Result<(StateEstimate, f64)> {
    let g2t;
    let cached = match engine {
        CbEngine::Cbpkf(_) => {
            g2t = compute_g2t(&model.h)?;
            Some(&g2t)
        }
        CbEngine::Vikf(_) => None,
    };
    adaptive_filter_step_cached(prior, z, model, cfg, engine, truth, cached)
}

/// As [`adaptive_filter_step`] with an optional precomputed
/// `G2^T = (H^T H + I)^{-1}` for the CB-penalized engine.
pub fn adaptive_filter_step_cached(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
    cfg: &AdaptiveConfig,
    engine: &CbEngine,
    truth: Option<&DVector<f64>>,
    g2t: Option<&DMatrix<f64>>,
) -> Result<(StateEstimate, f64)> {
    cfg.validate()?;
    let alpha_k = match (cfg.mode, truth) {
        (AlphaMode::TruthOracle, Some(x)) => alpha_for_step(x, cfg),
        (AlphaMode::TruthOracle, None) => {
            return Err(Error::Config("truth_oracle mode requires the true state".into()))
        }
        (AlphaMode::KfEstimate, None) => {
            let kf_post = kf_update(prior, z, model)?;
            alpha_for_step(&kf_post.mean, cfg)
        }
        (AlphaMode::KfEstimate, Some(_)) => {
            return Err(Error::Config("kf_estimate mode must not receive the true state".into()))
        }
    };

    let posterior = match engine {
        CbEngine::Cbpkf(base) => {
            let cb_cfg = CbPenaltyConfig {
                alpha: alpha_k,
                ..base.clone()
            };
            match g2t {
                Some(g) => cbpkf_update_cached(prior, z, model, &cb_cfg, g)?.0,
                None => crate::cbpkf::cbpkf_update(prior, z, model, &cb_cfg)?.0,
            }
        }
        CbEngine::Vikf(base) => {
            let v_cfg = VikfConfig {
                alpha: alpha_k,
                ..base.clone()
            };
            vikf_update(prior, z, model, &v_cfg)?.estimate
        }
    };
    Ok((posterior, alpha_k))
}
