//! Robust plane fitting: total least squares, multi-hypothesis MSAC and
//! temporal fusion of ground-plane estimates.
//!
//! The fitter deliberately keeps several distinct plane hypotheses alive
//! (ground, roofs, slopes). Distinctness is disjunctive: two hypotheses are
//! duplicates only when their normals are nearly parallel AND they explain
//! mostly the same points, so parallel-but-separated surfaces such as a
//! street and a flat roof both survive. The flattest surviving plane is the
//! ground candidate; the spread of ray ranges across all hypotheses doubles
//! as a depth uncertainty.

use std::collections::VecDeque;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{raycast_plane, Mat3, Plane, Ray, Vec3, WORLD_UP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneFitError {
    #[error("need at least {min} points, got {got}")]
    InsufficientPoints { got: usize, min: usize },
    #[error("points are collinear, plane is underdetermined")]
    CollinearPoints,
    #[error("no hypothesis intersects the ray")]
    NoIntersection,
}

/// Total-least-squares plane: centroid plus the smallest principal
/// direction of the scatter. Returns the plane and the mean squared
/// point-plane distance.
pub fn fit_plane_tls(points: &[Vec3]) -> Result<(Plane, f64), PlaneFitError> {
    if points.len() < 3 {
        return Err(PlaneFitError::InsufficientPoints { got: points.len(), min: 3 });
    }
    let n = points.len() as f64;
    let centroid: Vec3 = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let [lo, mid, hi] = order;
    // Collinear (or coincident) points: no spread in the second direction.
    if eig.eigenvalues[mid] <= 1e-9 * eig.eigenvalues[hi].max(1e-300) {
        return Err(PlaneFitError::CollinearPoints);
    }
    let normal = eig.eigenvectors.column(lo).into_owned();
    let plane = Plane::from_point_normal(centroid, normal);
    Ok((plane, eig.eigenvalues[lo].max(0.0)))
}

/// One plane hypothesis from [`multi_ransac`]. `inliers` are sorted indices
/// into the input point set; `mse` is the mean squared distance over those
/// inliers and `score` the truncated MSAC cost over all points (lower is
/// better).
#[derive(Debug, Clone)]
pub struct PlaneHypothesis {
    pub plane: Plane,
    pub inliers: Vec<usize>,
    pub mse: f64,
    pub score: f64,
}

impl PlaneHypothesis {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
}

#[derive(Debug, Clone)]
pub struct MultiRansacConfig {
    /// Point-plane distance below which a point supports a hypothesis, m.
    pub inlier_threshold: f64,
    pub max_solutions: usize,
    /// Two hypotheses are duplicates when their normal angle is at most this
    /// AND they share more than `max_shared_inlier_frac` of their inliers.
    pub min_normal_angle_deg: f64,
    pub max_shared_inlier_frac: f64,
    /// Hypotheses with fewer inliers than this fraction of the best
    /// hypothesis are discarded.
    pub min_inlier_frac_of_top: f64,
    pub iterations: usize,
}

impl Default for MultiRansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.5,
            max_solutions: 4,
            min_normal_angle_deg: 15.0,
            max_shared_inlier_frac: 0.8,
            min_inlier_frac_of_top: 0.5,
            iterations: 500,
        }
    }
}

/// Angle between two planes, orientation-free, in radians.
fn plane_angle(a: &Plane, b: &Plane) -> f64 {
    a.normal().dot(&b.normal()).abs().clamp(0.0, 1.0).acos()
}

fn shared_inliers(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut shared) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    shared
}

/// Extracts up to `max_solutions` distinct plane hypotheses by MSAC.
///
/// All minimal-sample candidates are refit on their inliers by
/// [`fit_plane_tls`], ranked by truncated cost, then greedily accepted while
/// distinct from every already-accepted hypothesis. Inliers are never
/// removed from the point set; the overlap rule alone enforces diversity.
/// Identical input and seed reproduce the identical result.
pub fn multi_ransac(
    points: &[Vec3],
    cfg: &MultiRansacConfig,
    seed: u64,
) -> Result<Vec<PlaneHypothesis>, PlaneFitError> {
    if points.len() < 3 {
        return Err(PlaneFitError::InsufficientPoints { got: points.len(), min: 3 });
    }
    let thresh = cfg.inlier_threshold;
    let thresh2 = thresh * thresh;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    struct Candidate {
        hyp: PlaneHypothesis,
        iteration: usize,
    }
    let mut candidates: Vec<Candidate> = Vec::new();

    let evaluate = |plane: &Plane| -> (Vec<usize>, f64, f64) {
        let mut inliers = Vec::new();
        let mut score = 0.0;
        let mut sq_sum = 0.0;
        for (i, p) in points.iter().enumerate() {
            let d2 = {
                let d = plane.signed_distance(*p);
                d * d
            };
            if d2 < thresh2 {
                inliers.push(i);
                sq_sum += d2;
                score += d2;
            } else {
                score += thresh2;
            }
        }
        let mse = if inliers.is_empty() { f64::INFINITY } else { sq_sum / inliers.len() as f64 };
        (inliers, mse, score)
    };

    for iteration in 0..cfg.iterations {
        let i = rng.random_range(0..points.len());
        let j = rng.random_range(0..points.len());
        let k = rng.random_range(0..points.len());
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        if normal.norm() < 1e-12 {
            continue;
        }
        let minimal = Plane::from_point_normal(points[i], normal);
        let (inliers, _, _) = evaluate(&minimal);
        if inliers.len() < 3 {
            continue;
        }
        let inlier_pts: Vec<Vec3> = inliers.iter().map(|&n| points[n]).collect();
        let Ok((plane, _)) = fit_plane_tls(&inlier_pts) else {
            continue;
        };
        let (inliers, mse, score) = evaluate(&plane);
        if inliers.len() < 3 {
            continue;
        }
        candidates.push(Candidate {
            hyp: PlaneHypothesis { plane, inliers, mse, score },
            iteration,
        });
    }

    candidates.sort_by(|a, b| {
        a.hyp
            .score
            .total_cmp(&b.hyp.score)
            .then(b.hyp.inlier_count().cmp(&a.hyp.inlier_count()))
            .then(a.iteration.cmp(&b.iteration))
    });

    let min_angle = cfg.min_normal_angle_deg.to_radians();
    let mut selected: Vec<PlaneHypothesis> = Vec::new();
    for c in candidates {
        if selected.len() >= cfg.max_solutions {
            break;
        }
        let duplicate = selected.iter().any(|s| {
            let angle_close = plane_angle(&s.plane, &c.hyp.plane) <= min_angle;
            let min_count = s.inlier_count().min(c.hyp.inlier_count()).max(1);
            let share_high = shared_inliers(&s.inliers, &c.hyp.inliers) as f64
                > cfg.max_shared_inlier_frac * min_count as f64;
            angle_close && share_high
        });
        if !duplicate {
            selected.push(c.hyp);
        }
    }

    if let Some(top) = selected.iter().map(PlaneHypothesis::inlier_count).max() {
        let keep = cfg.min_inlier_frac_of_top * top as f64;
        selected.retain(|h| h.inlier_count() as f64 >= keep);
    }
    Ok(selected)
}

/// Index of the hypothesis whose normal is most aligned with `up`; ties go
/// to the larger inlier count, then the lower MSE, then the first listed.
pub fn select_flattest(hypotheses: &[PlaneHypothesis], up: Vec3) -> Option<usize> {
    (0..hypotheses.len()).min_by(|&a, &b| {
        let (ha, hb) = (&hypotheses[a], &hypotheses[b]);
        let fa = ha.plane.normal().dot(&up).abs();
        let fb = hb.plane.normal().dot(&up).abs();
        fb.total_cmp(&fa)
            .then(hb.inlier_count().cmp(&ha.inlier_count()))
            .then(ha.mse.total_cmp(&hb.mse))
            .then(a.cmp(&b))
    })
}

/// Casts the ray against every hypothesis and Gaussian-fits the ranges:
/// returns their mean and population standard deviation. Hypotheses the ray
/// misses (parallel or behind the origin) are excluded.
pub fn raycast_uncertainty(
    hypotheses: &[PlaneHypothesis],
    ray: &Ray,
) -> Result<(f64, f64), PlaneFitError> {
    let ranges: Vec<f64> = hypotheses
        .iter()
        .filter_map(|h| raycast_plane(ray, &h.plane).ok().map(|(_, r)| r))
        .collect();
    if ranges.is_empty() {
        return Err(PlaneFitError::NoIntersection);
    }
    let n = ranges.len() as f64;
    let mean = ranges.iter().sum::<f64>() / n;
    let var = ranges.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// FIFO buffer of gated ground-plane inlier points across frames.
#[derive(Debug, Clone)]
pub struct PlaneBuffer {
    points: VecDeque<(Vec3, u64)>,
    capacity: usize,
}

impl PlaneBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { points: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, point: Vec3, frame: u64) {
        if self.points.len() == self.capacity {
            self.points.pop_front();
        }
        self.points.push_back((point, frame));
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn oldest_frame(&self) -> Option<u64> {
        self.points.front().map(|&(_, f)| f)
    }

    pub fn newest_frame(&self) -> Option<u64> {
        self.points.back().map(|&(_, f)| f)
    }

    pub fn clear(&mut self) {
        self.points.clear();
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.points.iter().map(|&(p, _)| p).collect()
    }
}

/// Temporally fused ground-plane estimate.
#[derive(Debug, Clone)]
pub struct FusedPlaneModel {
    pub plane: Plane,
    pub mse: f64,
    pub last_update_frame: u64,
    pub valid: bool,
}

impl FusedPlaneModel {
    pub fn invalid() -> Self {
        Self { plane: Plane::new(WORLD_UP, 0.0), mse: f64::INFINITY, last_update_frame: 0, valid: false }
    }
}

#[derive(Debug, Clone)]
pub struct TemporalConfig {
    pub buffer_capacity: usize,
    /// Incoming points are admitted when their squared distance to the
    /// current plane is below `gate_factor * mse`.
    pub gate_factor: f64,
    /// Lower bound on the gate distance, m. Keeps the gate open when a clean
    /// synthetic fit drives the MSE to zero.
    pub min_gate_distance: f64,
    /// When the gate has admitted nothing for this many frames the model
    /// has lost contact with the scene; it resets and refits from scratch.
    pub max_stale_frames: u64,
    pub ransac: MultiRansacConfig,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: 1000,
            gate_factor: 9.0,
            min_gate_distance: 0.05,
            max_stale_frames: 30,
            ransac: MultiRansacConfig::default(),
        }
    }
}

/// Admits `new_points` through the consistency gate, refits the buffer and
/// updates the fused model. A model that was valid going in stays valid: on
/// a failed refit the previous plane is left untouched. Frames that admit
/// nothing leave the model frozen rather than refitting the unchanged
/// buffer under a new seed — unless the gate has been starving for more
/// than `max_stale_frames`, in which case the scene has moved out from
/// under the model and the buffer restarts from the incoming points (the
/// old plane still stands until the refit on them succeeds). Returns the
/// hypothesis list of the refit for downstream uncertainty estimation;
/// empty when no refit ran or it failed.
pub fn temporal_update(
    buffer: &mut PlaneBuffer,
    model: &mut FusedPlaneModel,
    new_points: &[Vec3],
    frame: u64,
    cfg: &TemporalConfig,
    seed: u64,
) -> Vec<PlaneHypothesis> {
    if model.valid {
        let gate2 =
            (cfg.gate_factor * model.mse).max(cfg.min_gate_distance * cfg.min_gate_distance);
        let mut admitted = 0usize;
        for &p in new_points {
            if model.plane.distance(p).powi(2) < gate2 {
                buffer.push(p, frame);
                admitted += 1;
            }
        }
        if admitted == 0 {
            let starved = buffer
                .newest_frame()
                .is_none_or(|last| frame.saturating_sub(last) > cfg.max_stale_frames);
            if !starved || new_points.is_empty() {
                return Vec::new();
            }
            // The gate has rejected every observation for a while: the
            // surface moved out from under the model. Restart the buffer
            // from the incoming points; the old plane stays in force until
            // the refit below succeeds on the new surface.
            buffer.clear();
            for &p in new_points {
                buffer.push(p, frame);
            }
        }
    } else {
        for &p in new_points {
            buffer.push(p, frame);
        }
    }
    let pts = buffer.points();
    let hyps = match multi_ransac(&pts, &cfg.ransac, seed) {
        Ok(h) => h,
        Err(_) => return Vec::new(),
    };
    match select_flattest(&hyps, WORLD_UP) {
        Some(i) => {
            model.plane = hyps[i].plane;
            model.mse = hyps[i].mse;
            model.last_update_frame = frame;
            model.valid = true;
            hyps
        }
        None => Vec::new(),
    }
}
