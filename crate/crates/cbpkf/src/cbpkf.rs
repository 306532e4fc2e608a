//! Conditional bias-penalized Kalman filter update.
//!
//! The measurement update minimizes an apparent error covariance that adds
//! `alpha` times the expected squared Type-II conditional bias to the usual
//! error covariance. It is assembled from block matrices over the augmented
//! observation vector (observations stacked over the model forecast):
//!
//! - `C1` estimates the conditional-bias gain of the observations given the
//!   true state, computed through the pseudo-inverse of the augmented
//!   observation operator (`compute_c1`);
//! - `Lambda` is the CB-modified augmented observation-error covariance
//!   (`compute_lambda_blocks`), inverted blockwise via the Schur complement
//!   (`compute_weights`) to produce the observation and forecast weight
//!   matrices `w1`, `w2`;
//! - the gain is `K = (w1 H + w2)^{-1} w1`, with the true filtered error
//!   covariance `(w1 H + w2)^{-1} (w1 R w1^T + w2 S w2^T) (w1 H + w2)^{-T}`
//!   and the larger apparent covariance `alpha S + (w1 H + w2)^{-1}`, where
//!   `S` is the forecast error covariance.
//!
//! Setting `alpha = 0` reproduces the standard Kalman update exactly. Since
//! the minimized objective is the apparent covariance, the true filtered
//! covariance is not guaranteed below the forecast covariance; when that
//! check fails the update retries with `alpha` reduced geometrically,
//! falling back to the plain Kalman step at `alpha = 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Factor};
use crate::model::{EstimateKind, StateEstimate, SystemModel};

/// CB-penalty weight policy for one update.
#[derive(Debug, Clone)]
pub struct CbPenaltyConfig {
    /// Penalty weight `alpha >= 0`; 0 recovers the plain Kalman update.
    pub alpha: f64,
    /// Geometric reduction factor in (0, 1) applied when the covariance
    /// condition fails.
    pub reduce_factor: f64,
    /// Number of reductions to attempt before falling back to `alpha = 0`.
    pub max_iters: usize,
    /// Tolerance for the filtered-vs-forecast covariance check, relative to
    /// `trace` of the forecast covariance.
    pub psd_tol: f64,
    /// When set, the covariance condition checks the full PSD ordering of
    /// `forecast - filtered` instead of the element-wise diagonal
    /// comparison. If even `alpha = 0` fails the strict check (numerical
    /// noise), the plain Kalman step is still returned.
    pub strict_psd: bool,
}

impl CbPenaltyConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.reduce_factor > 0.0 && self.reduce_factor < 1.0) {
            return Err(Error::Config(format!(
                "reduce_factor must be in (0, 1), got {}",
                self.reduce_factor
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.psd_tol < 0.0 {
            return Err(Error::Config("psd_tol must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for CbPenaltyConfig {
    fn default() -> Self {
        // halving reaches alpha ~ 0.004 from 1.0 within the cap
        Self {
            alpha: 0.0,
            reduce_factor: 0.5,
            max_iters: 8,
            psd_tol: 1e-9,
            strict_psd: false,
        }
    }
}

/// Block matrices of one CB-penalized update, exposed for verification.
///
/// `c1` is stored n x m (rows are observations), matching the shapes
/// required by the Lambda blocks. `lambda21` is `lambda12` transposed and
/// is not stored.
#[derive(Debug, Clone)]
pub struct CbpkfIntermediates {
    pub c1: DMatrix<f64>,
    pub lambda11: DMatrix<f64>,
    pub lambda12: DMatrix<f64>,
    pub lambda22: DMatrix<f64>,
    pub gamma11: DMatrix<f64>,
    pub gamma12: DMatrix<f64>,
    pub gamma22: DMatrix<f64>,
    /// Observation weight (m x n).
    pub w1: DMatrix<f64>,
    /// Forecast weight (m x m).
    pub w2: DMatrix<f64>,
    /// CB-penalized gain (m x n).
    pub gain: DMatrix<f64>,
    /// Penalty weight actually used after any reductions.
    pub alpha_used: f64,
}

/// `(H^T H + I)^{-1}` — reusable across steps whenever `H` is
/// time-invariant; see [`cbpkf_update_cached`].
pub fn compute_g2t(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = h.ncols();
    let hth = h.transpose() * h + DMatrix::identity(m, m);
    let f = Factor::spd(hth, "cbpkf G2")?;
    let g2t = f.inverse(m, "cbpkf G2")?;
    Ok(symmetrize(&g2t))
}

/// Conditional-bias gain estimate `C1` (n x m) for the observation block.
///
/// `G2^T = (H^T H + I)^{-1}`, `G1 = H G2^T`, and with `Psi` the forecast
/// error covariance:
///
/// `L = G2^T [H^T (H Psi H^T + 2R) H + H^T H Psi + Psi H^T H + Psi + 2 Psi] G2`
/// `C1 = [(H Psi H^T + R) G1 + H Psi G2] L^{-1}`
pub fn compute_c1(model: &SystemModel, sigma_prior: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g2t = compute_g2t(&model.h)?;
    compute_c1_cached(model, sigma_prior, &g2t)
}

/// As [`compute_c1`] with a precomputed `G2^T`.
pub fn compute_c1_cached(
    model: &SystemModel,
    sigma_prior: &DMatrix<f64>,
    g2t: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let h = &model.h;
    let psi = sigma_prior;

    let h_psi = h * psi; // n x m
    let h_psi_ht = &h_psi * h.transpose(); // n x n
    let g1 = h * g2t; // n x m

    // L is symmetric positive definite: it equals G (Haug Psi Haug^T + 2 Raug) G^T
    // over the augmented operator, and Raug is positive definite.
    let a = &h_psi_ht + &model.r * 2.0;
    let hth = h.transpose() * h; // m x m
    let hth_psi = &hth * psi;
    let bracket =
        h.transpose() * a * h + &hth_psi + hth_psi.transpose() + psi + psi * 2.0;
    let l = symmetrize(&(g2t * bracket * g2t));

    let numerator = (&h_psi_ht + &model.r) * g1 + &h_psi * g2t; // n x m
    let lf = Factor::spd(l, "cbpkf L_k")?;
    // C1 = numerator * L^{-1}; L symmetric, so solve L X = numerator^T
    let x = lf.solve_mat(&numerator.transpose(), "cbpkf C1")?;
    Ok(x.transpose())
}

/// The CB-modified observation-error covariance blocks:
///
/// `Lambda11 = R + a(1-a) C1 Psi C1^T - a H Psi C1^T - a C1 Psi H^T`
/// `Lambda12 = -a C1 Psi`
/// `Lambda22 = Psi`  (the forecast error covariance)
pub fn compute_lambda_blocks(
    model: &SystemModel,
    sigma_prior: &DMatrix<f64>,
    c1: &DMatrix<f64>,
    alpha: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let psi = sigma_prior;
    let c1_psi = c1 * psi; // n x m
    let h_psi_c1t = &model.h * psi * c1.transpose(); // n x n
    let lambda11 = symmetrize(
        &(&model.r + &c1_psi * c1.transpose() * (alpha * (1.0 - alpha))
            - (&h_psi_c1t + h_psi_c1t.transpose()) * alpha),
    );
    let lambda12 = &c1_psi * (-alpha);
    (lambda11, lambda12, psi.clone())
}

/// Blocks of `Gamma = Lambda^{-1}`.
#[derive(Debug, Clone)]
pub struct GammaBlocks {
    pub gamma11: DMatrix<f64>,
    pub gamma12: DMatrix<f64>,
    pub gamma22: DMatrix<f64>,
}

/// Invert `Lambda` blockwise (Schur complement on `Lambda11`) and assemble
/// the weight matrices:
///
/// `w1 = Hhat1^T Gamma11 + Gamma21`, `w2 = Hhat1^T Gamma12 + Gamma22`,
/// with `Hhat1^T = H^T + alpha C1^T`.
pub fn compute_weights(
    model: &SystemModel,
    lambda11: &DMatrix<f64>,
    lambda12: &DMatrix<f64>,
    lambda22: &DMatrix<f64>,
    c1: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, GammaBlocks)> {
    let n = model.obs_dim();
    let m = model.state_dim();

    // Lambda11 is symmetric but in general indefinite for alpha > 0.
    let l11 = Factor::lu(lambda11.clone(), "cbpkf Lambda11")?;
    let inv11 = symmetrize(&l11.inverse(n, "cbpkf Lambda11")?);
    let y = &inv11 * lambda12; // n x m

    let schur = symmetrize(&(lambda22 - lambda12.transpose() * &y));
    let sf = Factor::lu(schur, "cbpkf Schur complement")?;
    let gamma22 = symmetrize(&sf.inverse(m, "cbpkf Gamma22")?);

    let gamma12 = -(&y * &gamma22); // n x m
    let gamma11 = symmetrize(&(&inv11 + &y * &gamma22 * y.transpose()));

    let hhat1t = model.h.transpose() + c1.transpose() * alpha; // m x n
    let w1 = &hhat1t * &gamma11 + gamma12.transpose(); // m x n
    let w2 = &hhat1t * &gamma12 + &gamma22; // m x m

    Ok((
        w1,
        w2,
        GammaBlocks {
            gamma11,
            gamma12,
            gamma22,
        },
    ))
}

struct AttemptOutput {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    apparent: DMatrix<f64>,
    intermediates: CbpkfIntermediates,
}

fn attempt(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
    g2t: &DMatrix<f64>,
    alpha: f64,
) -> Result<AttemptOutput> {
    let m = model.state_dim();
    let c1 = compute_c1_cached(model, &prior.cov, g2t)?;
    let (lambda11, lambda12, lambda22) = compute_lambda_blocks(model, &prior.cov, &c1, alpha);
    let (w1, w2, gamma) = compute_weights(model, &lambda11, &lambda12, &lambda22, &c1, alpha)?;

    let fused = &w1 * &model.h + &w2; // m x m
    let mf = Factor::lu(fused, "cbpkf fused information matrix")?;
    let gain = mf.solve_mat(&w1, "cbpkf gain")?; // m x n

    let innovation = z - &model.h * &prior.mean;
    let mean = &prior.mean + &gain * innovation;

    // cov = fused^{-1} (w1 R w1^T + w2 S w2^T) fused^{-T}
    let t = &w1 * &model.r * w1.transpose() + &w2 * &prior.cov * w2.transpose();
    let a = mf.solve_mat(&t, "cbpkf covariance")?;
    let cov = symmetrize(&mf.solve_mat(&a.transpose(), "cbpkf covariance")?.transpose());

    let fused_inv = mf.inverse(m, "cbpkf apparent covariance")?;
    let apparent = symmetrize(&(&prior.cov * alpha + fused_inv));

    Ok(AttemptOutput {
        mean,
        cov,
        apparent,
        intermediates: CbpkfIntermediates {
            c1,
            lambda11,
            lambda12,
            lambda22,
            gamma11: gamma.gamma11,
            gamma12: gamma.gamma12,
            gamma22: gamma.gamma22,
            w1,
            w2,
            gain,
            alpha_used: alpha,
        },
    })
}

fn cov_condition_ok(filtered: &DMatrix<f64>, forecast: &DMatrix<f64>, cfg: &CbPenaltyConfig) -> bool {
    let tol = cfg.psd_tol * forecast.trace().abs();
    if cfg.strict_psd {
        crate::linalg::is_psd(&(forecast - filtered), tol)
    } else {
        (0..forecast.nrows()).all(|i| filtered[(i, i)] <= forecast[(i, i)] + tol)
    }
}

/// CB-penalized measurement update with iterative `alpha` reduction.
///
/// Returns the filtered estimate (true error covariance), the block
/// intermediates of the final attempt, and the apparent error covariance.
pub fn cbpkf_update(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
    cfg: &CbPenaltyConfig,
) -> Result<(StateEstimate, CbpkfIntermediates, DMatrix<f64>)> {
    let g2t = compute_g2t(&model.h)?;
    cbpkf_update_cached(prior, z, model, cfg, &g2t)
}

/// As [`cbpkf_update`] with a precomputed `G2^T = (H^T H + I)^{-1}` (shareable
/// across threads; recompute it whenever `H` changes).
pub fn cbpkf_update_cached(
    prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
    cfg: &CbPenaltyConfig,
    g2t: &DMatrix<f64>,
) -> Result<(StateEstimate, CbpkfIntermediates, DMatrix<f64>)> {
    if prior.kind != EstimateKind::Prior {
        return Err(Error::Config("cbpkf_update expects a prior estimate".into()));
    }
    if z.len() != model.obs_dim() || prior.dim() != model.state_dim() {
        return Err(Error::dim(
            "cbpkf_update",
            format!("state {} / obs {}", model.state_dim(), model.obs_dim()),
            format!("state {} / obs {}", prior.dim(), z.len()),
        ));
    }
    cfg.validate()?;

    let mut alpha = cfg.alpha;
    let mut reductions = 0usize;
    loop {
        let result = attempt(prior, z, model, g2t, alpha);
        let failed = match &result {
            Ok(out) => !cov_condition_ok(&out.cov, &prior.cov, cfg),
            // singular Lambda11 or Schur block: treat as a failed attempt
            // and retry with smaller alpha
            Err(_) => true,
        };
        if alpha == 0.0 || !failed {
            let out = result?;
            let est = StateEstimate::new(out.mean, out.cov, EstimateKind::Posterior, prior.step)?;
            return Ok((est, out.intermediates, out.apparent));
        }
        reductions += 1;
        alpha = if reductions >= cfg.max_iters {
            0.0
        } else {
            alpha * cfg.reduce_factor
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kf::kf_update_with_gain;
    use crate::model::EstimateKind;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn prior(mean: DVector<f64>, cov: DMatrix<f64>) -> StateEstimate {
        StateEstimate::new(mean, cov, EstimateKind::Prior, 3).unwrap()
    }

    fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    }

    fn random_model(m: usize, n: usize, rng: &mut ChaCha8Rng) -> SystemModel {
        SystemModel::new(
            DMatrix::identity(m, m),
            DMatrix::zeros(m, m),
            DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal)),
            random_spd(n, rng),
        )
        .unwrap()
    }

    /// Direct evaluation of the conditional-bias gain over the augmented
    /// system: `C = (Haug Psi Haug^T + Raug) Gaug^T [Gaug (Haug Psi Haug^T
    /// + 2 Raug) Gaug^T]^{-1}` with `Gaug` the pseudo-inverse of `Haug`;
    /// `C1` is its top n x m block. Independent of the production chain.
    fn c1_brute_force(model: &SystemModel, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = (model.obs_dim(), model.state_dim());
        let mut haug = DMatrix::zeros(n + m, m);
        haug.view_mut((0, 0), (n, m)).copy_from(&model.h);
        haug.view_mut((n, 0), (m, m)).copy_from(&DMatrix::identity(m, m));
        let mut raug = DMatrix::zeros(n + m, n + m);
        raug.view_mut((0, 0), (n, n)).copy_from(&model.r);
        raug.view_mut((n, n), (m, m)).copy_from(sigma);

        let gaug = (haug.transpose() * &haug).try_inverse().unwrap() * haug.transpose();
        let hph = &haug * sigma * haug.transpose();
        let inner = (&gaug * (&hph + &raug * 2.0) * gaug.transpose())
            .try_inverse()
            .unwrap();
        let c = (&hph + &raug) * gaug.transpose() * inner;
        c.view((0, 0), (n, m)).into_owned()
    }

    #[test]
    fn c1_matches_augmented_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(m, n) in &[(1usize, 1usize), (1, 10), (2, 3), (3, 7)] {
            let model = random_model(m, n, &mut rng);
            let sigma = random_spd(m, &mut rng);
            let c1 = compute_c1(&model, &sigma).unwrap();
            let oracle = c1_brute_force(&model, &sigma);
            assert_eq!(c1.nrows(), n);
            assert_eq!(c1.ncols(), m);
            for i in 0..n {
                for j in 0..m {
                    assert_relative_eq!(c1[(i, j)], oracle[(i, j)], max_relative = 1e-9, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn c1_with_zero_observation_operator() {
        // H = 0 keeps the chain well defined and sends the gain to zero
        let m = 2;
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = SystemModel::new(
            DMatrix::identity(m, m),
            DMatrix::zeros(m, m),
            DMatrix::zeros(n, m),
            random_spd(n, &mut rng),
        )
        .unwrap();
        let sigma = random_spd(m, &mut rng);
        let c1 = compute_c1(&model, &sigma).unwrap();
        let oracle = c1_brute_force(&model, &sigma);
        assert!((&c1 - &oracle).amax() < 1e-10);
        assert!(c1.amax() < 1e-12);

        let pr = prior(DVector::zeros(m), sigma);
        let cfg = CbPenaltyConfig::new(0.4);
        let (_, inter, _) = cbpkf_update(&pr, &DVector::from_element(n, 1.0), &model, &cfg).unwrap();
        assert!(inter.gain.amax() < 1e-12);
    }

    #[test]
    fn lambda_blocks_at_alpha_zero_and_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(2, 4, &mut rng);
        let sigma = random_spd(2, &mut rng);
        let c1 = compute_c1(&model, &sigma).unwrap();

        let (l11, l12, l22) = compute_lambda_blocks(&model, &sigma, &c1, 0.0);
        assert!((&l11 - &model.r).amax() < 1e-14);
        assert!(l12.amax() == 0.0);
        assert_eq!(l22, sigma);

        // at alpha = 1 the alpha(1-alpha) term vanishes exactly
        let (l11, _, _) = compute_lambda_blocks(&model, &sigma, &c1, 1.0);
        let h_psi_c1t = &model.h * &sigma * c1.transpose();
        let expect = symmetrize(&(&model.r - (&h_psi_c1t + h_psi_c1t.transpose())));
        assert!((&l11 - &expect).amax() < 1e-12);
    }

    #[test]
    fn lambda_blocks_match_independent_transcription() {
        // m=1, n=10, alpha=0.6 against a literal re-evaluation written
        // without reusing any intermediate of the production code
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = random_model(1, 10, &mut rng);
        let sigma = random_spd(1, &mut rng);
        let c1 = compute_c1(&model, &sigma).unwrap();
        let alpha = 0.6;
        let (l11, l12, l22) = compute_lambda_blocks(&model, &sigma, &c1, alpha);

        let psi = sigma.clone();
        let expect11 = &model.r + &c1 * &psi * c1.transpose() * (alpha * (1.0 - alpha))
            - &model.h * &psi * c1.transpose() * alpha
            - &c1 * &psi * model.h.transpose() * alpha;
        let expect12 = -(&c1 * &psi) * alpha;
        assert!((&l11 - &expect11).amax() < 1e-12);
        assert!((&l12 - &expect12).amax() < 1e-14);
        assert_eq!(l22, sigma);
    }

    #[test]
    fn weights_at_alpha_zero_are_information_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_model(2, 5, &mut rng);
        let sigma = random_spd(2, &mut rng);
        let c1 = compute_c1(&model, &sigma).unwrap();
        let (l11, l12, l22) = compute_lambda_blocks(&model, &sigma, &c1, 0.0);
        let (w1, w2, _) = compute_weights(&model, &l11, &l12, &l22, &c1, 0.0).unwrap();

        let r_inv = model.r.clone().try_inverse().unwrap();
        let expect_w1 = model.h.transpose() * r_inv;
        let expect_w2 = sigma.clone().try_inverse().unwrap();
        assert!((&w1 - &expect_w1).amax() < 1e-9);
        assert!((&w2 - &expect_w2).amax() < 1e-9);
    }

    #[test]
    fn gamma_is_lambda_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let m = 1 + (rng.random::<u32>() % 3) as usize;
            let n = 1 + (rng.random::<u32>() % 6) as usize;
            let model = random_model(m, n, &mut rng);
            let sigma = random_spd(m, &mut rng);
            let alpha = rng.random::<f64>().max(1e-3);
            let c1 = compute_c1(&model, &sigma).unwrap();
            let (l11, l12, l22) = compute_lambda_blocks(&model, &sigma, &c1, alpha);
            let (_, _, gamma) = match compute_weights(&model, &l11, &l12, &l22, &c1, alpha) {
                Ok(v) => v,
                // random draws can produce a genuinely singular Lambda11;
                // the update layer handles that by reducing alpha
                Err(_) => continue,
            };

            let k = n + m;
            let mut lambda = DMatrix::zeros(k, k);
            lambda.view_mut((0, 0), (n, n)).copy_from(&l11);
            lambda.view_mut((0, n), (n, m)).copy_from(&l12);
            lambda.view_mut((n, 0), (m, n)).copy_from(&l12.transpose());
            lambda.view_mut((n, n), (m, m)).copy_from(&l22);
            let mut gamma_full = DMatrix::zeros(k, k);
            gamma_full.view_mut((0, 0), (n, n)).copy_from(&gamma.gamma11);
            gamma_full.view_mut((0, n), (n, m)).copy_from(&gamma.gamma12);
            gamma_full
                .view_mut((n, 0), (m, n))
                .copy_from(&gamma.gamma12.transpose());
            gamma_full.view_mut((n, n), (m, m)).copy_from(&gamma.gamma22);

            let resid = (&lambda * &gamma_full - DMatrix::identity(k, k)).amax();
            let scale = crate::linalg::max_abs(&lambda) * crate::linalg::max_abs(&gamma_full);
            assert!(
                resid <= 1e-8 * scale.max(1.0),
                "Lambda Gamma deviates from identity: {resid:.3e} (scale {scale:.3e})"
            );
        }
    }

    #[test]
    fn alpha_zero_equals_kf_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..300 {
            let m = [1usize, 2, 5][(rng.random::<u32>() % 3) as usize];
            let n = [1usize, 5, 10][(rng.random::<u32>() % 3) as usize];
            let model = random_model(m, n, &mut rng);
            let sigma = random_spd(m, &mut rng);
            let mean = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let pr = prior(mean, sigma);

            let cfg = CbPenaltyConfig::new(0.0);
            let (cb_post, inter, _) = cbpkf_update(&pr, &z, &model, &cfg).unwrap();
            let (kf_post, kf_gain) = kf_update_with_gain(&pr, &z, &model).unwrap();

            let scale = kf_post.mean.amax().max(1.0);
            assert!((&cb_post.mean - &kf_post.mean).amax() <= 1e-10 * scale);
            let cscale = crate::linalg::max_abs(&kf_post.cov).max(1e-300);
            assert!(crate::linalg::max_abs(&(&cb_post.cov - &kf_post.cov)) <= 1e-10 * cscale);
            assert!(crate::linalg::max_abs(&(&inter.gain - &kf_gain)) <= 1e-10 * kf_gain.amax().max(1.0));
        }
    }

    #[test]
    fn reduction_loop_honors_documented_rule() {
        // construct a step that violates the covariance condition at the
        // initial alpha: weak observations relative to the forecast
        let n = 10;
        let model = SystemModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::identity(n, n) * 2.25,
        )
        .unwrap();
        let sigma = DMatrix::from_element(1, 1, 0.0196);
        let pr = prior(DVector::zeros(1), sigma.clone());
        let z = DVector::from_element(n, 0.5);

        let cfg = CbPenaltyConfig {
            alpha: 1.2,
            ..Default::default()
        };
        let (post, inter, _) = cbpkf_update(&pr, &z, &model, &cfg).unwrap();
        // alpha 1.2 violates the condition here; the loop must have reduced
        // it to 1.2 * c^k for the first passing k
        assert!(inter.alpha_used < 1.2);
        let mut expect = 1.2;
        let mut found = false;
        for _ in 0..cfg.max_iters {
            expect *= cfg.reduce_factor;
            if (inter.alpha_used - expect).abs() < 1e-15 {
                found = true;
                break;
            }
        }
        assert!(found || inter.alpha_used == 0.0, "alpha_used {}", inter.alpha_used);
        let tol = cfg.psd_tol * sigma.trace();
        assert!(post.cov[(0, 0)] <= sigma[(0, 0)] + tol);

        // a passing alpha is left untouched
        let cfg_ok = CbPenaltyConfig::new(0.3);
        let (_, inter_ok, _) = cbpkf_update(&pr, &z, &model, &cfg_ok).unwrap();
        assert_eq!(inter_ok.alpha_used, 0.3);
    }

    #[test]
    fn unbiasedness_and_posterior_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let m = 1 + (rng.random::<u32>() % 3) as usize;
            let n = 1 + (rng.random::<u32>() % 8) as usize;
            let model = random_model(m, n, &mut rng);
            let sigma = random_spd(m, &mut rng);
            let pr = prior(DVector::zeros(m), sigma.clone());
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let cfg = CbPenaltyConfig {
                alpha: rng.random::<f64>(),
                max_iters: 8,
                ..Default::default()
            };
            let (post, inter, _) = cbpkf_update(&pr, &z, &model, &cfg).unwrap();

            // W Haug = I for the assembled weight matrix
            let fused = &inter.w1 * &model.h + &inter.w2;
            let fi = fused.try_inverse().unwrap();
            let wh = &fi * (&inter.w1 * &model.h + &inter.w2 * DMatrix::identity(m, m));
            assert!((wh - DMatrix::identity(m, m)).amax() < 1e-8);

            assert!(post.check_cov().is_ok());

            // after the reduction loop the diagonal condition holds
            let tol = cfg.psd_tol * sigma.trace().abs();
            for i in 0..m {
                assert!(post.cov[(i, i)] <= sigma[(i, i)] + tol);
            }
        }
    }

    #[test]
    fn apparent_dominates_filtered_covariance() {
        // The apparent covariance adds the weighted CB penalty on top of
        // the error covariance, so it dominates in the PSD order. For the
        // unbiasedness-constrained weights this ordering provably holds in
        // the scalar case and empirically throughout the weak-observation
        // regime the penalty is designed for; with several observations
        // each individually sharper than the forecast (per-observation
        // noise below ~2x the forecast variance at n = 10) the reported
        // apparent covariance can dip below the true one, so that corner
        // is excluded here.
        // 1-D grid: unconditional
        for &h in &[0.5, 1.0, 2.0] {
            for s_exp in -3..=1 {
                for r_exp in -3..=1 {
                    for i in 1..=12 {
                        let alpha = i as f64 * 0.1;
                        let s = 10f64.powi(s_exp);
                        let r = 10f64.powi(r_exp);
                        let model = SystemModel::new(
                            DMatrix::identity(1, 1),
                            DMatrix::zeros(1, 1),
                            DMatrix::from_element(1, 1, h),
                            DMatrix::from_element(1, 1, r),
                        )
                        .unwrap();
                        let pr = prior(DVector::zeros(1), DMatrix::from_element(1, 1, s));
                        let cfg = CbPenaltyConfig {
                            alpha,
                            psd_tol: f64::INFINITY, // no reduction: raw ordering
                            ..Default::default()
                        };
                        let (post, _, apparent) =
                            cbpkf_update(&pr, &DVector::from_element(1, 1.0), &model, &cfg).unwrap();
                        assert!(
                            apparent[(0, 0)] >= post.cov[(0, 0)] - 1e-12 * apparent[(0, 0)].abs(),
                            "1-D ordering failed at h={h} s={s} r={r} alpha={alpha}"
                        );
                    }
                }
            }
        }

        // multi-observation, weak-observation regime
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..200 {
            let m = 1 + (rng.random::<u32>() % 3) as usize;
            let n = m * (1 + (rng.random::<u32>() % 4) as usize);
            let h = crate::sim::observation_matrix(m, n);
            let s = 10f64.powf(rng.random::<f64>() * 2.0 - 3.0);
            let r = s * (20.0 + 200.0 * rng.random::<f64>());
            let model = SystemModel::new(
                DMatrix::identity(m, m),
                DMatrix::zeros(m, m),
                h,
                DMatrix::identity(n, n) * r,
            )
            .unwrap();
            let pr = prior(DVector::zeros(m), DMatrix::identity(m, m) * s);
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let cfg = CbPenaltyConfig {
                alpha: 0.05 + 1.15 * rng.random::<f64>(),
                psd_tol: f64::INFINITY,
                ..Default::default()
            };
            let (post, _, apparent) = cbpkf_update(&pr, &z, &model, &cfg).unwrap();
            let diff = &apparent - &post.cov;
            assert!(crate::linalg::is_psd(&diff, 1e-9 * apparent.trace().abs()));
        }
    }

    #[test]
    fn strict_psd_flag_still_returns_kf_fallback() {
        let n = 10;
        let model = SystemModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::identity(n, n) * 2.25,
        )
        .unwrap();
        let pr = prior(DVector::zeros(1), DMatrix::from_element(1, 1, 0.0196));
        let z = DVector::from_element(n, 0.1);
        let cfg = CbPenaltyConfig {
            alpha: 1.2,
            strict_psd: true,
            ..Default::default()
        };
        let (post, inter, _) = cbpkf_update(&pr, &z, &model, &cfg).unwrap();
        assert!(inter.alpha_used < 1.2);
        assert!(post.check_cov().is_ok());
    }
}
