//! Drive filters over simulated trajectories.
//!
//! All methods consume the identical trajectory (paired design), starting
//! from the climatological estimate. Timing covers the filter loop only.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::adaptive::{adaptive_filter_step_cached, AdaptiveConfig, CbEngine};
use crate::cbpkf::{cbpkf_update_cached, compute_g2t, CbPenaltyConfig};
use crate::error::Result;
use crate::kf::{kf_predict, kf_update};
use crate::model::{EstimateKind, StateEstimate, SystemModel};
use crate::sim::{CaseParams, Trajectory};
use crate::vikf::{vikf_update, VikfConfig};

/// Cycles discarded from the start of every metric computation, so that
/// initialization transients do not contaminate the statistics.
pub const BURN_IN: usize = 100;

/// A filter to run over a trajectory.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    Kf,
    Cbpkf(CbPenaltyConfig),
    Vikf(VikfConfig),
    Adaptive {
        cfg: AdaptiveConfig,
        engine: CbEngine,
    },
}

impl MethodSpec {
    /// Stable identifier for artifact naming.
    pub fn id(&self) -> String {
        match self {
            MethodSpec::Kf => "kf".to_string(),
            MethodSpec::Cbpkf(cfg) => format!("cbpkf_a{:.2}", cfg.alpha),
            MethodSpec::Vikf(cfg) => {
                if (cfg.alpha_boost - 1.0).abs() < 1e-12 {
                    format!("vikf_a{:.2}", cfg.alpha)
                } else {
                    format!("vikf_a{:.2}_b{:.3}", cfg.alpha, cfg.alpha_boost)
                }
            }
            MethodSpec::Adaptive { cfg, engine } => {
                let engine_tag = match engine {
                    CbEngine::Cbpkf(_) => "cbpkf",
                    CbEngine::Vikf(_) => "vikf",
                };
                match cfg.mode {
                    crate::adaptive::AlphaMode::KfEstimate => {
                        format!("adaptive_{engine_tag}_g{:.2}", cfg.gamma)
                    }
                    crate::adaptive::AlphaMode::TruthOracle => {
                        format!("oracle_{engine_tag}_g{:.2}", cfg.gamma)
                    }
                }
            }
        }
    }
}

/// Output of one filter pass.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// Posterior means, aligned with the trajectory.
    pub estimates: Vec<DVector<f64>>,
    /// Posterior covariance diagonals, aligned with the trajectory.
    pub variances: Vec<DVector<f64>>,
    /// Penalty weight used per step (0 for the plain filter).
    pub alpha_trace: Vec<f64>,
    /// Wall-clock seconds spent in the filter loop.
    pub seconds: f64,
}

/// Climatological start: zero mean, stationary variance, treated as the
/// posterior of step 0.
pub fn initial_estimate(case: &CaseParams) -> StateEstimate {
    StateEstimate {
        mean: DVector::zeros(case.m),
        cov: case.initial_covariance(),
        kind: EstimateKind::Posterior,
        step: 0,
    }
}

/// Run one filter over the whole trajectory.
pub fn run_filter(trajectory: &Trajectory, init: &StateEstimate, method: &MethodSpec) -> Result<FilterRun> {
    let steps = trajectory.len();
    let mut estimates = Vec::with_capacity(steps);
    let mut variances = Vec::with_capacity(steps);
    let mut alpha_trace = Vec::with_capacity(steps);

    // the simulated observation operator is time-invariant, so the
    // CB-penalized pseudo-inverse block can be prepared once
    let g2t: Option<DMatrix<f64>> = match method {
        MethodSpec::Cbpkf(_)
        | MethodSpec::Adaptive {
            engine: CbEngine::Cbpkf(_),
            ..
        } => Some(compute_g2t(&trajectory.models[0].h)?),
        _ => None,
    };

    let mut posterior = init.clone();
    let start = Instant::now();
    for k in 0..steps {
        let model: &SystemModel = &trajectory.models[k];
        let prior = kf_predict(&posterior, model)?;
        let z = &trajectory.observations[k];
        let (post, alpha_used) = match method {
            MethodSpec::Kf => (kf_update(&prior, z, model)?, 0.0),
            MethodSpec::Cbpkf(cfg) => {
                let (post, inter, _) = cbpkf_update_cached(&prior, z, model, cfg, g2t.as_ref().unwrap())?;
                (post, inter.alpha_used)
            }
            MethodSpec::Vikf(cfg) => {
                let out = vikf_update(&prior, z, model, cfg)?;
                (out.estimate, out.alpha_used)
            }
            MethodSpec::Adaptive { cfg, engine } => {
                let truth = match cfg.mode {
                    crate::adaptive::AlphaMode::TruthOracle => Some(&trajectory.truth[k]),
                    crate::adaptive::AlphaMode::KfEstimate => None,
                };
                let (post, alpha_k) =
                    adaptive_filter_step_cached(&prior, z, model, cfg, engine, truth, g2t.as_ref())?;
                (post, alpha_k)
            }
        };
        estimates.push(post.mean.clone());
        variances.push(post.cov.diagonal());
        alpha_trace.push(alpha_used);
        posterior = post;
    }
    let seconds = start.elapsed().as_secs_f64();

    Ok(FilterRun {
        estimates,
        variances,
        alpha_trace,
        seconds,
    })
}

/// Unconditional RMSE of estimates against the trajectory truth, burn-in
/// excluded. For m > 1 the squared error is averaged over components.
pub fn unconditional_rmse_of(trajectory: &Trajectory, estimates: &[DVector<f64>], burn_in: usize) -> f64 {
    let m = trajectory.initial_truth.len() as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in burn_in..trajectory.len() {
        let e = &estimates[k] - &trajectory.truth[k];
        acc += e.norm_squared() / m;
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    (acc / count as f64).sqrt()
}
