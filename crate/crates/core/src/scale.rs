//! Metric scale recovery for relative inverse-depth maps.
//!
//! Monocular depth networks return inverse depth up to an affine transform.
//! Given sparse correspondences between map values rho' and metrically
//! triangulated inverse depths rho, the transform
//!
//! ```text
//!   rho = theta0 + rho' * theta1
//! ```
//!
//! is recovered by least squares, optionally wrapped in a two-point RANSAC
//! that tolerates corrupted correspondences (moving objects, bad tracks).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("correspondences have no usable spread in rho'")]
    DegenerateSamples,
    #[error("no admissible sample pair produced a valid solution")]
    NoValidSample,
}

/// One sparse correspondence: map value rho' against metric inverse depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthPair {
    pub relative: f64,
    pub metric: f64,
}

impl DepthPair {
    pub fn new(relative: f64, metric: f64) -> Self {
        Self { relative, metric }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub theta0: f64,
    pub theta1: f64,
}

impl AffineParams {
    pub fn apply(&self, relative: f64) -> f64 {
        self.theta0 + relative * self.theta1
    }

    pub fn residual(&self, pair: &DepthPair) -> f64 {
        self.apply(pair.relative) - pair.metric
    }
}

/// Minimum spread of rho' below which the normal equations are meaningless.
const MIN_RELATIVE_SPREAD: f64 = 1e-9;

/// Ordinary least squares over all pairs via the 2x2 normal equations.
pub fn fit_affine_lsq(pairs: &[DepthPair]) -> Result<AffineParams, ScaleError> {
    if pairs.len() < 2 {
        return Err(ScaleError::DegenerateSamples);
    }
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pairs {
        sx += p.relative;
        sy += p.metric;
        sxx += p.relative * p.relative;
        sxy += p.relative * p.metric;
        lo = lo.min(p.relative);
        hi = hi.max(p.relative);
    }
    if hi - lo < MIN_RELATIVE_SPREAD {
        return Err(ScaleError::DegenerateSamples);
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 {
        return Err(ScaleError::DegenerateSamples);
    }
    let theta1 = (n * sxy - sx * sy) / det;
    let theta0 = (sy - theta1 * sx) / n;
    Ok(AffineParams { theta0, theta1 })
}

#[derive(Debug, Clone)]
pub struct AffineRansacConfig {
    /// Inlier threshold as a fraction of the median metric inverse depth.
    pub threshold_median_frac: f64,
    /// Minimum rho' separation of a sample pair, as a fraction of the rho'
    /// interquartile range. Guards against fronto-parallel degeneracy where
    /// all map values coincide.
    pub min_gap_iqr_frac: f64,
    pub iterations: usize,
}

impl Default for AffineRansacConfig {
    fn default() -> Self {
        Self { threshold_median_frac: 0.05, min_gap_iqr_frac: 0.1, iterations: 200 }
    }
}

/// Two-point RANSAC around [`fit_affine_lsq`]. Candidate solutions with a
/// non-positive slope are rejected outright (inverse depth cannot flip sign
/// under a valid affine alignment); ties in inlier count keep the earliest
/// candidate, so identical inputs and seed always reproduce the same result.
///
/// Returns the refit parameters together with the indices of their inliers.
pub fn fit_affine_ransac(
    pairs: &[DepthPair],
    cfg: &AffineRansacConfig,
    seed: u64,
) -> Result<(AffineParams, Vec<usize>), ScaleError> {
    if pairs.len() < 2 {
        return Err(ScaleError::NoValidSample);
    }
    let threshold = cfg.threshold_median_frac * median(pairs.iter().map(|p| p.metric.abs()));
    let min_gap = cfg.min_gap_iqr_frac * iqr(pairs.iter().map(|p| p.relative));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, AffineParams)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..pairs.len());
        let j = rng.random_range(0..pairs.len());
        let (a, b) = (pairs[i], pairs[j]);
        let gap = (a.relative - b.relative).abs();
        if i == j || gap < min_gap || gap < MIN_RELATIVE_SPREAD {
            continue;
        }
        let theta1 = (a.metric - b.metric) / (a.relative - b.relative);
        if theta1 <= 0.0 {
            continue;
        }
        let params = AffineParams { theta0: a.metric - theta1 * a.relative, theta1 };
        let count = pairs.iter().filter(|p| params.residual(p).abs() < threshold).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, params));
        }
    }
    let (_, candidate) = best.ok_or(ScaleError::NoValidSample)?;

    let inliers: Vec<usize> = (0..pairs.len())
        .filter(|&i| candidate.residual(&pairs[i]).abs() < threshold)
        .collect();
    let subset: Vec<DepthPair> = inliers.iter().map(|&i| pairs[i]).collect();
    let refit = match fit_affine_lsq(&subset) {
        Ok(p) if p.theta1 > 0.0 => p,
        // Degenerate or sign-flipping refit: fall back to the sample model.
        _ => candidate,
    };
    let final_inliers: Vec<usize> = (0..pairs.len())
        .filter(|&i| refit.residual(&pairs[i]).abs() < threshold)
        .collect();
    if final_inliers.is_empty() {
        return Err(ScaleError::NoValidSample);
    }
    Ok((refit, final_inliers))
}

/// Applies the affine transform to every valid cell of a relative map.
/// Cells mapping to a non-positive inverse depth become invalid (NaN).
pub fn apply_affine(map: &Grid<f64>, params: &AffineParams) -> Grid<f64> {
    let data = map
        .data()
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return f64::NAN;
            }
            let metric = params.apply(v);
            if metric > 0.0 {
                metric
            } else {
                f64::NAN
            }
        })
        .collect();
    Grid::from_vec(map.width(), map.height(), data)
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Interquartile range by nearest-rank quartiles.
fn iqr(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    if v.len() < 4 {
        return 0.0;
    }
    v[3 * v.len() / 4] - v[v.len() / 4]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lsq_recovers_exact_affine_relation() {
        let pairs = [
            DepthPair::new(1.0, 0.05),
            DepthPair::new(2.0, 0.10),
            DepthPair::new(3.0, 0.15),
        ];
        let p = fit_affine_lsq(&pairs).unwrap();
        assert_abs_diff_eq!(p.theta0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta1, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn lsq_rejects_constant_relative_depth() {
        let pairs = [DepthPair::new(2.0, 0.05), DepthPair::new(2.0, 0.10)];
        assert_eq!(fit_affine_lsq(&pairs).unwrap_err(), ScaleError::DegenerateSamples);
        assert_eq!(fit_affine_lsq(&pairs[..1]).unwrap_err(), ScaleError::DegenerateSamples);
    }

    fn synthetic_pairs(theta0: f64, theta1: f64, outlier_frac: f64, seed: u64) -> Vec<DepthPair> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 100;
        (0..n)
            .map(|i| {
                let rel = 0.5 + 4.0 * i as f64 / n as f64;
                if (i as f64) < outlier_frac * n as f64 {
                    // Corrupted correspondence, e.g. a track on a moving object.
                    DepthPair::new(rel, rng.random_range(0.2..2.0))
                } else {
                    let noise = rng.random_range(-5e-4..5e-4);
                    DepthPair::new(rel, theta0 + rel * theta1 + noise)
                }
            })
            .collect()
    }

    #[test]
    fn ransac_recovers_parameters_under_thirty_percent_outliers() {
        for seed in 0..20 {
            let pairs = synthetic_pairs(0.02, 0.03, 0.3, 1000 + seed);
            let (p, inliers) = fit_affine_ransac(&pairs, &AffineRansacConfig::default(), seed).unwrap();
            assert!((p.theta0 - 0.02).abs() / 0.02 < 0.02, "theta0 {} (seed {seed})", p.theta0);
            assert!((p.theta1 - 0.03).abs() / 0.03 < 0.02, "theta1 {} (seed {seed})", p.theta1);
            assert!(inliers.len() >= 60);
        }
    }

    #[test]
    fn ransac_is_deterministic_for_a_fixed_seed() {
        let pairs = synthetic_pairs(0.01, 0.05, 0.2, 7);
        let a = fit_affine_ransac(&pairs, &AffineRansacConfig::default(), 42).unwrap();
        let b = fit_affine_ransac(&pairs, &AffineRansacConfig::default(), 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn fronto_parallel_map_yields_no_valid_sample() {
        // All relative values essentially identical: every sample pair falls
        // below the minimum gap.
        let pairs: Vec<DepthPair> =
            (0..50).map(|i| DepthPair::new(2.0 + 1e-12 * i as f64, 0.05)).collect();
        let err = fit_affine_ransac(&pairs, &AffineRansacConfig::default(), 3).unwrap_err();
        assert_eq!(err, ScaleError::NoValidSample);
    }

    #[test]
    fn negative_slope_relations_are_rejected() {
        let pairs: Vec<DepthPair> =
            (0..50).map(|i| DepthPair::new(i as f64 * 0.1, 1.0 - 0.01 * i as f64)).collect();
        let err = fit_affine_ransac(&pairs, &AffineRansacConfig::default(), 5).unwrap_err();
        assert_eq!(err, ScaleError::NoValidSample);
    }

    #[test]
    fn apply_affine_invalidates_non_positive_results_and_keeps_nan() {
        let mut map = Grid::filled(3, 1, 1.0f64);
        map.set(0, 1, -0.5); // maps to negative inverse depth
        map.set(0, 2, f64::NAN);
        let out = apply_affine(&map, &AffineParams { theta0: 0.01, theta1: 0.05 });
        assert_abs_diff_eq!(out.get(0, 0), 0.06, epsilon = 1e-6);
        assert!(!out.valid_at(0, 1));
        assert!(!out.valid_at(0, 2));
    }
}
