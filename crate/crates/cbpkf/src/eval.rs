//! Metrics: conditional RMSE against truth thresholds, percent reduction,
//! variance-calibration binning, and wall-clock timing ratios.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::runner::{initial_estimate, run_filter, MethodSpec, BURN_IN};
use crate::sim::CaseParams;

/// Number of thresholds in the default conditioning grid.
pub const DEFAULT_THRESHOLDS: usize = 21;

/// Upper end of the conditioning grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridTop {
    /// 99.9th percentile of the truth sample (robust to a single extreme draw).
    #[default]
    Percentile999,
    /// The literal largest truth value.
    LiteralMax,
}

/// Conditioning rule for the tail metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailMode {
    /// Condition on `truth > t` (upper tail, as reported).
    #[default]
    Upper,
    /// Condition on `|truth| > t` (both tails).
    Absolute,
}

fn tail_magnitude(x: &DVector<f64>, mode: TailMode) -> f64 {
    // scalar truth conditions on its value; multivariate truth on its norm
    let v = if x.len() == 1 { x[0] } else { x.norm() };
    match mode {
        TailMode::Upper => v,
        TailMode::Absolute => v.abs(),
    }
}

/// Evenly spaced thresholds from 0 to the grid top.
pub fn threshold_grid(truth: &[DVector<f64>], count: usize, top: GridTop, mode: TailMode) -> Vec<f64> {
    assert!(count >= 2, "need at least two thresholds");
    let mut mags: Vec<f64> = truth.iter().map(|x| tail_magnitude(x, mode)).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let top_val = match top {
        GridTop::LiteralMax => *mags.last().unwrap_or(&0.0),
        GridTop::Percentile999 => {
            let idx = ((mags.len() as f64) * 0.999).floor() as usize;
            mags[idx.min(mags.len().saturating_sub(1))]
        }
    };
    (0..count)
        .map(|i| top_val * i as f64 / (count - 1) as f64)
        .collect()
}

/// RMSE over the steps whose truth exceeds a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRmse {
    pub threshold: f64,
    /// `None` marks an empty conditioning set.
    pub rmse: Option<f64>,
    pub count: usize,
}

/// Conditional RMSE per threshold. Thresholds must be sorted ascending and
/// start at 0. For m > 1 the squared error is averaged over components and
/// conditioning is on the truth norm.
pub fn conditional_rmse(
    truth: &[DVector<f64>],
    est: &[DVector<f64>],
    thresholds: &[f64],
    mode: TailMode,
) -> Result<Vec<ThresholdRmse>> {
    if truth.len() != est.len() {
        return Err(Error::dim("conditional_rmse", format!("{}", truth.len()), format!("{}", est.len())));
    }
    if thresholds.is_empty() || thresholds[0] != 0.0 {
        return Err(Error::Config("thresholds must start at 0".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("thresholds must be sorted ascending".into()));
    }
    let m = truth.first().map_or(1, |x| x.len()) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for (x, e) in truth.iter().zip(est) {
                if tail_magnitude(x, mode) > t {
                    acc += (e - x).norm_squared() / m;
                    count += 1;
                }
            }
            ThresholdRmse {
                threshold: t,
                rmse: (count > 0).then(|| (acc / count as f64).sqrt()),
                count,
            }
        })
        .collect())
}

/// `100 (rmse_ref - rmse_method) / rmse_ref`; `None` when the reference
/// vanishes.
pub fn percent_reduction(rmse_ref: f64, rmse_method: f64) -> Option<f64> {
    (rmse_ref > 0.0).then(|| 100.0 * (rmse_ref - rmse_method) / rmse_ref)
}

/// The highest-threshold entry pair with at least `min_count` conditioning
/// samples, returned as (threshold, count, percent reduction of method over
/// reference).
pub fn tail_reduction(
    reference: &[ThresholdRmse],
    method: &[ThresholdRmse],
    min_count: usize,
) -> Option<(f64, usize, f64)> {
    for (r, m) in reference.iter().zip(method).rev() {
        if r.count >= min_count {
            let red = percent_reduction(r.rmse?, m.rmse?)?;
            return Some((r.threshold, r.count, red));
        }
    }
    None
}

/// One equal-population bin of the variance-calibration diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    /// Mean filtered variance in the bin.
    pub mean_variance: f64,
    /// Mean squared actual error in the bin.
    pub mean_sq_error: f64,
    pub count: usize,
}

/// Bucket steps into equal-population bins by filtered variance and report
/// the mean variance and mean squared error per bin. Produces fewer bins
/// when there are fewer samples than requested bins.
pub fn variance_calibration(
    est: &[f64],
    truth: &[f64],
    var: &[f64],
    n_bins: usize,
) -> Result<Vec<CalibrationBin>> {
    if n_bins < 2 {
        return Err(Error::Config("n_bins must be >= 2".into()));
    }
    if est.len() != truth.len() || est.len() != var.len() {
        return Err(Error::dim(
            "variance_calibration",
            format!("{}", est.len()),
            format!("{} / {}", truth.len(), var.len()),
        ));
    }
    if est.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..est.len()).collect();
    order.sort_by(|&a, &b| var[a].partial_cmp(&var[b]).unwrap());

    let bins = n_bins.min(est.len());
    let base = est.len() / bins;
    let extra = est.len() % bins;
    let mut out = Vec::with_capacity(bins);
    let mut idx = 0usize;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        let slice = &order[idx..idx + size];
        idx += size;
        let mut v_acc = 0.0;
        let mut e_acc = 0.0;
        for &i in slice {
            v_acc += var[i];
            let d = est[i] - truth[i];
            e_acc += d * d;
        }
        out.push(CalibrationBin {
            mean_variance: v_acc / size as f64,
            mean_sq_error: e_acc / size as f64,
            count: size,
        });
    }
    Ok(out)
}

/// Ordinary least-squares slope of y against x (with intercept).
pub fn regression_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Normalized wall-clock comparison: run every method over the identical
/// trajectory (after one unmeasured warm-up pass each) and report wall time
/// as a multiple of the plain Kalman filter's. `repeats` measured passes are
/// taken per method, keeping the fastest.
pub fn timing_comparison(
    case: &CaseParams,
    methods: &[MethodSpec],
    repeats: usize,
) -> Result<Vec<(String, f64)>> {
    let trajectory = crate::sim::simulate(case)?;
    let init = initial_estimate(case);

    let best_seconds = |spec: &MethodSpec| -> Result<f64> {
        let _ = run_filter(&trajectory, &init, spec)?; // warm-up
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let run = run_filter(&trajectory, &init, spec)?;
            best = best.min(run.seconds);
        }
        Ok(best)
    };

    let kf_seconds = best_seconds(&MethodSpec::Kf)?;
    let mut out = vec![("kf".to_string(), 1.0)];
    for spec in methods {
        if matches!(spec, MethodSpec::Kf) {
            continue;
        }
        let s = best_seconds(spec)?;
        out.push((spec.id(), s / kf_seconds));
    }
    Ok(out)
}

/// Per-case, per-method time series retained for reporting: the paired
/// plain-filter baseline plus the method under evaluation, with variances,
/// the per-step penalty weights, and loop timings. All sequences have the
/// burn-in removed.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub case_id: u32,
    pub method_id: String,
    pub seed: u64,
    pub truth: Vec<DVector<f64>>,
    pub kf_est: Vec<DVector<f64>>,
    pub method_est: Vec<DVector<f64>>,
    pub kf_var: Vec<DVector<f64>>,
    pub method_var: Vec<DVector<f64>>,
    pub alpha_trace: Vec<f64>,
    pub kf_seconds: f64,
    pub method_seconds: f64,
}

impl RunReport {
    /// Assemble a report from paired filter runs, discarding `burn_in` steps.
    pub fn from_runs(
        case_id: u32,
        method_id: String,
        seed: u64,
        trajectory: &crate::sim::Trajectory,
        kf_run: &crate::runner::FilterRun,
        method_run: &crate::runner::FilterRun,
        burn_in: usize,
    ) -> Self {
        let cut = burn_in.min(trajectory.len());
        RunReport {
            case_id,
            method_id,
            seed,
            truth: trajectory.truth[cut..].to_vec(),
            kf_est: kf_run.estimates[cut..].to_vec(),
            method_est: method_run.estimates[cut..].to_vec(),
            kf_var: kf_run.variances[cut..].to_vec(),
            method_var: method_run.variances[cut..].to_vec(),
            alpha_trace: method_run.alpha_trace[cut..].to_vec(),
            kf_seconds: kf_run.seconds,
            method_seconds: method_run.seconds,
        }
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Unconditional RMSE of the method estimates.
    pub fn method_rmse(&self) -> f64 {
        rmse_of(&self.truth, &self.method_est)
    }

    /// Unconditional RMSE of the paired baseline.
    pub fn kf_rmse(&self) -> f64 {
        rmse_of(&self.truth, &self.kf_est)
    }
}

/// Unconditional RMSE between aligned sequences (component-averaged).
pub fn rmse_of(truth: &[DVector<f64>], est: &[DVector<f64>]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let m = truth[0].len() as f64;
    let acc: f64 = truth
        .iter()
        .zip(est)
        .map(|(x, e)| (e - x).norm_squared() / m)
        .sum();
    (acc / truth.len() as f64).sqrt()
}

/// Convenience used by the benchmark: run the paired design for one case.
pub fn paired_reports(
    case_id: u32,
    case: &CaseParams,
    methods: &[MethodSpec],
) -> Result<Vec<RunReport>> {
    let trajectory = crate::sim::simulate(case)?;
    let init = initial_estimate(case);
    let kf_run = run_filter(&trajectory, &init, &MethodSpec::Kf)?;
    let mut reports = Vec::with_capacity(methods.len());
    for spec in methods {
        let method_run = if matches!(spec, MethodSpec::Kf) {
            kf_run.clone()
        } else {
            run_filter(&trajectory, &init, spec)?
        };
        reports.push(RunReport::from_runs(
            case_id,
            spec.id(),
            case.seed,
            &trajectory,
            &kf_run,
            &method_run,
            BURN_IN,
        ));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalars(vals: &[f64]) -> Vec<DVector<f64>> {
        vals.iter().map(|&v| DVector::from_element(1, v)).collect()
    }

    #[test]
    fn perfect_estimates_have_zero_rmse_everywhere() {
        let truth = scalars(&[0.1, -0.5, 2.0, 0.7, 1.4]);
        let grid = vec![0.0, 0.5, 1.0];
        let rows = conditional_rmse(&truth, &truth, &grid, TailMode::Upper).unwrap();
        for r in &rows {
            if r.count > 0 {
                assert_eq!(r.rmse, Some(0.0));
            }
        }
    }

    #[test]
    fn threshold_zero_conditions_on_positive_half() {
        let truth = scalars(&[1.0, -1.0, 2.0, -2.0, 3.0]);
        let est = scalars(&[1.5, 0.0, 2.5, 0.0, 2.0]);
        let rows = conditional_rmse(&truth, &est, &[0.0], TailMode::Upper).unwrap();
        assert_eq!(rows[0].count, 3);
        // subset oracle: steps with truth > 0 are (1,1.5), (2,2.5), (3,2)
        let expect = ((0.25 + 0.25 + 1.0) / 3.0_f64).sqrt();
        assert!((rows[0].rmse.unwrap() - expect).abs() < 1e-14);

        let rows = conditional_rmse(&truth, &est, &[0.0], TailMode::Absolute).unwrap();
        assert_eq!(rows[0].count, 5);
    }

    #[test]
    fn threshold_above_max_is_empty_marker() {
        let truth = scalars(&[1.0, 2.0]);
        let est = scalars(&[1.0, 2.0]);
        let rows = conditional_rmse(&truth, &est, &[0.0, 10.0], TailMode::Upper).unwrap();
        assert_eq!(rows[1].count, 0);
        assert_eq!(rows[1].rmse, None);
    }

    #[test]
    fn threshold_grid_validation() {
        let truth = scalars(&[1.0]);
        let est = scalars(&[1.0]);
        assert!(conditional_rmse(&truth, &est, &[0.5, 1.0], TailMode::Upper).is_err());
        assert!(conditional_rmse(&truth, &est, &[0.0, 1.0, 0.5], TailMode::Upper).is_err());
        assert!(conditional_rmse(&truth, &est, &[], TailMode::Upper).is_err());
    }

    #[test]
    fn adding_perfect_step_never_raises_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let n = 50;
            let truth: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let est: Vec<f64> = truth
                .iter()
                .map(|&x| x + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let grid = vec![0.0, 0.3, 0.9];
            let base = conditional_rmse(&scalars(&truth), &scalars(&est), &grid, TailMode::Upper).unwrap();

            // append one perfectly estimated step above every threshold
            let mut truth2 = truth.clone();
            let mut est2 = est.clone();
            truth2.push(5.0);
            est2.push(5.0);
            let more = conditional_rmse(&scalars(&truth2), &scalars(&est2), &grid, TailMode::Upper).unwrap();
            for (a, b) in base.iter().zip(&more) {
                if let (Some(ra), Some(rb)) = (a.rmse, b.rmse) {
                    assert!(rb <= ra + 1e-12);
                }
            }
        }
    }

    #[test]
    fn percent_reduction_arithmetic() {
        assert_eq!(percent_reduction(2.0, 1.5), Some(25.0));
        assert_eq!(percent_reduction(1.0, 1.0), Some(0.0));
        assert_eq!(percent_reduction(0.0, 1.0), None);
        // antisymmetry up to the changed denominator:
        // ref->method reduction p implies method->ref reduction -p*ref/method
        let p = percent_reduction(2.0, 1.5).unwrap();
        let q = percent_reduction(1.5, 2.0).unwrap();
        assert!((q + p * 2.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn calibration_bins_partition_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1003;
        let var: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let est: Vec<f64> = truth
            .iter()
            .zip(&var)
            .map(|(&x, &v)| x + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bins = variance_calibration(&est, &truth, &var, 10).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), n);
        // equal population within one sample
        let min = bins.iter().map(|b| b.count).min().unwrap();
        let max = bins.iter().map(|b| b.count).max().unwrap();
        assert!(max - min <= 1);
        // bins ordered by variance
        for w in bins.windows(2) {
            assert!(w[0].mean_variance <= w[1].mean_variance);
        }
    }

    #[test]
    fn chi_square_generated_errors_are_calibrated() {
        // (est - truth)^2 drawn as var * chi^2_1: binned mean squared error
        // tracks the bin variance within Monte Carlo error
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 40_000;
        let var: Vec<f64> = (0..n).map(|_| 0.2 + 1.8 * rng.random::<f64>()).collect();
        let truth = vec![0.0; n];
        let est: Vec<f64> = var
            .iter()
            .map(|&v| v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bins = variance_calibration(&est, &truth, &var, 20).unwrap();
        for b in &bins {
            // chi^2_1 mean relative std is sqrt(2/count)
            let se = b.mean_variance * (2.0 / b.count as f64).sqrt();
            assert!(
                (b.mean_sq_error - b.mean_variance).abs() < 3.0 * se + 1e-12,
                "bin mse {} vs var {} (se {se})",
                b.mean_sq_error,
                b.mean_variance
            );
        }
        let pts: Vec<(f64, f64)> = bins.iter().map(|b| (b.mean_variance, b.mean_sq_error)).collect();
        let slope = regression_slope(&pts).unwrap();
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn constant_variance_collapses_to_uniform_bins() {
        let est = vec![1.0; 10];
        let truth = vec![0.0; 10];
        let var = vec![2.0; 10];
        let bins = variance_calibration(&est, &truth, &var, 3).unwrap();
        // one effective variance level; bins still partition the sample
        assert!(bins.iter().all(|b| (b.mean_variance - 2.0).abs() < 1e-15));
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 10);
    }

    #[test]
    fn fewer_samples_than_bins() {
        let bins = variance_calibration(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 2.0], 8).unwrap();
        assert_eq!(bins.len(), 2);
    }

    #[test]
    fn tail_reduction_picks_highest_populated_threshold() {
        let reference = vec![
            ThresholdRmse { threshold: 0.0, rmse: Some(2.0), count: 1000 },
            ThresholdRmse { threshold: 1.0, rmse: Some(2.0), count: 100 },
            ThresholdRmse { threshold: 2.0, rmse: Some(2.0), count: 10 },
        ];
        let method = vec![
            ThresholdRmse { threshold: 0.0, rmse: Some(1.9), count: 1000 },
            ThresholdRmse { threshold: 1.0, rmse: Some(1.5), count: 100 },
            ThresholdRmse { threshold: 2.0, rmse: Some(1.0), count: 10 },
        ];
        let (t, c, red) = tail_reduction(&reference, &method, 50).unwrap();
        assert_eq!(t, 1.0);
        assert_eq!(c, 100);
        assert!((red - 25.0).abs() < 1e-12);
    }
}
