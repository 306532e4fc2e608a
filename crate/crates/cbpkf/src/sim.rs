//! Synthetic nonstationary linear system.
//!
//! Generates truth trajectories and observations from
//!
//! `X_k = phi^p_{k-1} X_{k-1} + W_{k-1}`,  `w_j ~ N(0, (sigma_w^p)^2)`
//! `Z_k = H X_k + V_k`,                    `v_i ~ N(0, (sigma_v^p)^2)`
//!
//! where `phi^p`, `sigma_w^p` and `sigma_v^p` are re-drawn every step by
//! adding zero-mean normal noise to the base values and rejecting deviates
//! outside the admissible bounds (`phi^p` in [0.5, 0.95], both sigmas
//! >= 0.01). A parameter with zero noise std passes through unchanged and
//! unbounded, which permits exactly-deterministic degenerate systems in
//! tests.
//!
//! Randomness comes from a single ChaCha stream seeded by `CaseParams::seed`,
//! so a given parameter set reproduces its trajectory bit for bit. Draw
//! order per step is: phi, sigma_w, sigma_v (each with its rejection loop),
//! then the m components of W, then the n components of V. Distinct cases
//! should use distinct seeds; `derive_case_seed` gives a stable per-case
//! derivation from one master seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemModel;

/// Admissible range for the perturbed transition coefficient.
pub const PHI_BOUNDS: (f64, f64) = (0.5, 0.95);
/// Lower bound for perturbed noise standard deviations.
pub const SIGMA_FLOOR: f64 = 0.01;
/// Rejection-sampling draw cap per parameter per step.
const REJECTION_CAP: usize = 1_000_000;

/// Whether parameters are re-perturbed every step or only once per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    #[default]
    PerStep,
    PerRun,
}

/// Parameter set for one synthetic case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseParams {
    /// Base model-noise std.
    pub sigma_w: f64,
    /// Std of the noise added to `sigma_w`.
    pub gamma_w: f64,
    /// Base observation-noise std.
    pub sigma_v: f64,
    /// Std of the noise added to `sigma_v`.
    pub gamma_v: f64,
    /// Base state-transition coefficient.
    pub phi: f64,
    /// Std of the noise added to `phi`.
    pub gamma_phi: f64,
    /// State dimension.
    pub m: usize,
    /// Observation dimension.
    pub n: usize,
    /// Number of time steps.
    pub n_cycles: usize,
    /// RNG seed; fully determines the trajectory.
    pub seed: u64,
    #[serde(default)]
    pub perturb_mode: PerturbMode,
}

impl CaseParams {
    /// Validate the parameter invariants. Zero base sigmas are accepted so
    /// that noise-free degenerate systems remain constructible; the bounds
    /// in `perturb_params` only apply to noisy draws.
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::Config(format!("phi must be in (0, 1), got {}", self.phi)));
        }
        if self.sigma_w < 0.0 || self.sigma_v < 0.0 {
            return Err(Error::Config("sigma_w and sigma_v must be nonnegative".into()));
        }
        if self.gamma_w < 0.0 || self.gamma_v < 0.0 || self.gamma_phi < 0.0 {
            return Err(Error::Config("gamma_w, gamma_v, gamma_phi must be nonnegative".into()));
        }
        if self.m < 1 || self.n < 1 || self.n_cycles < 1 {
            return Err(Error::Config("m, n, n_cycles must all be >= 1".into()));
        }
        Ok(())
    }

    /// Stationary variance of the base AR(1) process, `sigma_w^2 / (1 - phi^2)`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma_w * self.sigma_w / (1.0 - self.phi * self.phi)
    }

    /// The filters start from climatology: zero mean with stationary
    /// variance on the diagonal.
    pub fn initial_covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.m, self.m) * self.stationary_variance()
    }
}

/// One step's realized perturbed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbedParams {
    pub phi: f64,
    pub sigma_w: f64,
    pub sigma_v: f64,
}

/// Observation matrix: each of the n rows senses one state component with
/// unit gain, cycling through components. For m = 1 this is the all-ones
/// column; when m divides n it stacks n/m identity blocks.
pub fn observation_matrix(m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |i, j| if i % m == j { 1.0 } else { 0.0 })
}

fn draw_bounded(
    base: f64,
    noise_std: f64,
    lo: f64,
    hi: f64,
    what: &str,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if noise_std == 0.0 {
        return Ok(base);
    }
    for _ in 0..REJECTION_CAP {
        let draw = base + noise_std * rng.sample::<f64, _>(StandardNormal);
        if draw >= lo && draw <= hi {
            return Ok(draw);
        }
    }
    Err(Error::Degenerate(format!(
        "no admissible {what} draw in {REJECTION_CAP} attempts (base {base}, noise std {noise_std})"
    )))
}

/// Draw one set of perturbed parameters by rejection sampling.
pub fn perturb_params(base: &CaseParams, rng: &mut ChaCha8Rng) -> Result<PerturbedParams> {
    let phi = draw_bounded(base.phi, base.gamma_phi, PHI_BOUNDS.0, PHI_BOUNDS.1, "phi", rng)?;
    let sigma_w = draw_bounded(base.sigma_w, base.gamma_w, SIGMA_FLOOR, f64::INFINITY, "sigma_w", rng)?;
    let sigma_v = draw_bounded(base.sigma_v, base.gamma_v, SIGMA_FLOOR, f64::INFINITY, "sigma_v", rng)?;
    Ok(PerturbedParams { phi, sigma_w, sigma_v })
}

/// A simulated run: truth, observations, and the per-step models supplied
/// to the filters (built from the same perturbed parameters that generated
/// the data).
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Initial truth `X_0`, drawn from the stationary distribution.
    pub initial_truth: DVector<f64>,
    /// `X_k` for k = 1..=n_cycles.
    pub truth: Vec<DVector<f64>>,
    /// `Z_k`, aligned with `truth`.
    pub observations: Vec<DVector<f64>>,
    /// Per-step models, aligned with `truth`.
    pub models: Vec<SystemModel>,
    /// Realized perturbed parameters, aligned with `truth`.
    pub perturbed: Vec<PerturbedParams>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Simulate a full trajectory for `case`.
pub fn simulate(case: &CaseParams) -> Result<Trajectory> {
    case.validate()?;
    let (m, n) = (case.m, case.n);
    let h = observation_matrix(m, n);
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);

    let s0 = case.stationary_variance().max(0.0).sqrt();
    let initial_truth = DVector::from_fn(m, |_, _| s0 * rng.sample::<f64, _>(StandardNormal));

    let per_run = match case.perturb_mode {
        PerturbMode::PerRun => Some(perturb_params(case, &mut rng)?),
        PerturbMode::PerStep => None,
    };

    let mut truth = Vec::with_capacity(case.n_cycles);
    let mut observations = Vec::with_capacity(case.n_cycles);
    let mut models = Vec::with_capacity(case.n_cycles);
    let mut perturbed = Vec::with_capacity(case.n_cycles);

    let mut x = initial_truth.clone();
    for _ in 0..case.n_cycles {
        let p = match per_run {
            Some(p) => p,
            None => perturb_params(case, &mut rng)?,
        };
        let mut next = &x * p.phi;
        for j in 0..m {
            next[j] += p.sigma_w * rng.sample::<f64, _>(StandardNormal);
        }
        let mut z = &h * &next;
        for i in 0..n {
            z[i] += p.sigma_v * rng.sample::<f64, _>(StandardNormal);
        }

        let model = SystemModel::new(
            DMatrix::identity(m, m) * p.phi,
            DMatrix::identity(m, m) * (p.sigma_w * p.sigma_w),
            h.clone(),
            DMatrix::identity(n, n) * (p.sigma_v * p.sigma_v),
        )?;

        x = next.clone();
        truth.push(next);
        observations.push(z);
        models.push(model);
        perturbed.push(p);
    }

    Ok(Trajectory {
        initial_truth,
        truth,
        observations,
        models,
        perturbed,
    })
}

/// Derive a per-case seed from a master seed so that subsets of cases keep
/// their streams. SplitMix64 over `master ^ f(case_id)`.
pub fn derive_case_seed(master: u64, case_id: u32) -> u64 {
    let mut z = master ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(u64::from(case_id) + 1));
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the standard 12-case benchmark matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub id: u32,
    /// Group 1/2/3 by increasing model-noise variability.
    pub group: u8,
    pub params: CaseParams,
}

/// The 12 standard cases: sigma_w = 0.1, sigma_v = 1.5, phi = 0.7 throughout;
/// gamma_w in {0.01, 0.1, 0.2} across groups; (gamma_v, gamma_phi) sweeping
/// {0.4, 1.2} x {0.1, 0.8} within each group.
pub fn benchmark_cases(m: usize, n: usize, n_cycles: usize, master_seed: u64) -> Vec<BenchmarkCase> {
    let gamma_w_by_group = [0.01, 0.1, 0.2];
    let inner = [(0.4, 0.1), (0.4, 0.8), (1.2, 0.1), (1.2, 0.8)];
    let mut cases = Vec::with_capacity(12);
    for (g, &gamma_w) in gamma_w_by_group.iter().enumerate() {
        for (i, &(gamma_v, gamma_phi)) in inner.iter().enumerate() {
            let id = (g * 4 + i + 1) as u32;
            cases.push(BenchmarkCase {
                id,
                group: (g + 1) as u8,
                params: CaseParams {
                    sigma_w: 0.1,
                    gamma_w,
                    sigma_v: 1.5,
                    gamma_v,
                    phi: 0.7,
                    gamma_phi,
                    m,
                    n,
                    n_cycles,
                    seed: derive_case_seed(master_seed, id),
                    perturb_mode: PerturbMode::PerStep,
                },
            });
        }
    }
    cases
}

/// Group -> fixed CB-penalty weight used in the benchmark sweeps (0.7 for
/// group 1, 0.6 for group 2, 0.5 for group 3).
pub fn group_fixed_alpha(group: u8) -> f64 {
    match group {
        1 => 0.7,
        2 => 0.6,
        _ => 0.5,
    }
}

/// Group -> proportionality constant for adaptive weighting from the
/// filtered estimate (3.0 / 1.0 / 0.5).
pub fn group_adaptive_gamma(group: u8) -> f64 {
    match group {
        1 => 3.0,
        2 => 1.0,
        _ => 0.5,
    }
}

/// Group -> proportionality constant for oracle (truth-based) adaptive
/// weighting (3.0 / 1.5 / 1.0).
pub fn group_oracle_gamma(group: u8) -> f64 {
    match group {
        1 => 3.0,
        2 => 1.5,
        _ => 1.0,
    }
}
