//! Sparse depth tracking on a region of interest around the target box.
//!
//! A 3x3 grid is laid over the target bounding box inflated by a margin on
//! every side; the center cell is the box itself and stays empty so the
//! (moving) target never contaminates the ground features. Each surrounding
//! tile holds a capped number of feature tracks whose inverse depth is
//! estimated by two-view triangulation against the first observation and
//! fused recursively over time.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{
    backproject, triangulate_inverse_depth, GeometryError, Intrinsics, Pose, TriangulationConfig,
    Vec2, Vec3,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("inflated ROI lies outside the image")]
    RoiOutsideImage,
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub center: Vec2,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center: Vec2, width: f64, height: f64) -> Self {
        assert!(width > 0.0 && height > 0.0, "bounding box must have positive extent");
        Self { center, width, height }
    }

    pub fn min(&self) -> Vec2 {
        Vec2::new(self.center.x - self.width / 2.0, self.center.y - self.height / 2.0)
    }

    pub fn max(&self) -> Vec2 {
        Vec2::new(self.center.x + self.width / 2.0, self.center.y + self.height / 2.0)
    }

    pub fn contains(&self, px: Vec2) -> bool {
        let (lo, hi) = (self.min(), self.max());
        px.x >= lo.x && px.x < hi.x && px.y >= lo.y && px.y < hi.y
    }

    pub fn min_side(&self) -> f64 {
        self.width.min(self.height)
    }
}

/// Half-open pixel rectangle `[min, max)`. May be empty after clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRect {
    pub min: Vec2,
    pub max: Vec2,
}

impl PixelRect {
    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x).max(0.0) * (self.max.y - self.min.y).max(0.0)
    }

    pub fn contains(&self, px: Vec2) -> bool {
        px.x >= self.min.x && px.x < self.max.x && px.y >= self.min.y && px.y < self.max.y
    }
}

/// 3x3 tiling of the inflated region of interest. Tile 4 (row-major center)
/// is the bounding box itself and never hosts features. Tiles are clamped to
/// the image; clamped-away tiles simply have zero area.
#[derive(Debug, Clone)]
pub struct RoiGrid {
    pub bbox: BoundingBox,
    tiles: [PixelRect; 9],
}

pub const CENTER_TILE: usize = 4;

impl RoiGrid {
    pub fn tiles(&self) -> &[PixelRect; 9] {
        &self.tiles
    }

    /// Outer ROI rectangle (union of all tiles).
    pub fn roi_rect(&self) -> PixelRect {
        PixelRect { min: self.tiles[0].min, max: self.tiles[8].max }
    }

    /// Index of the non-center tile containing `px`, if any.
    pub fn tile_of(&self, px: Vec2) -> Option<usize> {
        (0..9).find(|&i| i != CENTER_TILE && self.tiles[i].contains(px))
    }

    pub fn in_roi(&self, px: Vec2) -> bool {
        self.roi_rect().contains(px)
    }
}

/// Lays the 3x3 grid over `bbox` inflated on each side by
/// `margin_factor * min(bbox width, bbox height)`, clamping tiles to the
/// image. Errors only when the box itself is clamped to nothing.
pub fn update_roi(
    bbox: &BoundingBox,
    margin_factor: f64,
    intr: &Intrinsics,
) -> Result<RoiGrid, RoiError> {
    let margin = margin_factor * bbox.min_side();
    let (lo, hi) = (bbox.min(), bbox.max());
    let xs = [lo.x - margin, lo.x, hi.x, hi.x + margin];
    let ys = [lo.y - margin, lo.y, hi.y, hi.y + margin];
    let cx = |v: f64| v.clamp(0.0, intr.width as f64);
    let cy = |v: f64| v.clamp(0.0, intr.height as f64);

    let mut tiles = [PixelRect { min: Vec2::zeros(), max: Vec2::zeros() }; 9];
    for row in 0..3 {
        for col in 0..3 {
            tiles[row * 3 + col] = PixelRect {
                min: Vec2::new(cx(xs[col]), cy(ys[row])),
                max: Vec2::new(cx(xs[col + 1]), cy(ys[row + 1])),
            };
        }
    }
    if tiles[CENTER_TILE].area() == 0.0 {
        return Err(RoiError::RoiOutsideImage);
    }
    Ok(RoiGrid { bbox: *bbox, tiles })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Immature,
    Mature,
}

#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub id: u64,
    pub first_pixel: Vec2,
    pub first_pose: Pose,
    pub current_pixel: Vec2,
    pub inv_depth_mean: f64,
    pub inv_depth_var: f64,
    pub status: TrackStatus,
}

/// Precision-weighted product of two Gaussians over inverse depth.
pub fn fuse_inverse_depth(prior: (f64, f64), meas: (f64, f64)) -> (f64, f64) {
    let (m0, v0) = prior;
    let (m1, v1) = meas;
    debug_assert!(v0 > 0.0 && v1 > 0.0);
    let sum = v0 + v1;
    ((m0 * v1 + m1 * v0) / sum, v0 * v1 / sum)
}

#[derive(Debug, Clone)]
pub struct RoiConfig {
    /// ROI margin per side, as a multiple of the shorter bbox side.
    pub margin_factor: f64,
    /// Feature cap per non-center tile.
    pub max_per_tile: usize,
    /// A track matures when sigma drops to this fraction of its mean.
    pub promotion_rel_sigma: f64,
    /// Weak prior installed at track creation; the first real measurement
    /// dominates it by many orders of magnitude.
    pub prior_mean: f64,
    pub prior_var: f64,
    pub triangulation: TriangulationConfig,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            margin_factor: 2.0,
            max_per_tile: 25,
            promotion_rel_sigma: 0.05,
            prior_mean: 0.1,
            prior_var: 1e6,
            triangulation: TriangulationConfig::default(),
        }
    }
}

/// Feature tracks of the current ROI, in stable creation order.
#[derive(Debug, Clone, Default)]
pub struct RoiTracker {
    tracks: Vec<FeatureTrack>,
}

impl RoiTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[FeatureTrack] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.tracks.iter().any(|t| t.id == id)
    }

    /// Steps every live track with this frame's observations. Tracks without
    /// an observation or whose observation left the ROI are dropped. A
    /// degenerate (hover) baseline leaves the depth estimate untouched;
    /// otherwise the new measurement is fused and the status refreshed.
    pub fn step_tracks(
        &mut self,
        observations: &HashMap<u64, Vec2>,
        pose: &Pose,
        intr: &Intrinsics,
        grid: &RoiGrid,
        cfg: &RoiConfig,
    ) {
        self.tracks.retain_mut(|track| {
            let Some(&px) = observations.get(&track.id) else {
                return false;
            };
            if !grid.in_roi(px) || grid.bbox.contains(px) {
                return false;
            }
            track.current_pixel = px;
            match triangulate_inverse_depth(
                track.first_pixel,
                &track.first_pose,
                px,
                pose,
                intr,
                &cfg.triangulation,
            ) {
                Ok((rho, var)) if rho > 0.0 => {
                    let fused =
                        fuse_inverse_depth((track.inv_depth_mean, track.inv_depth_var), (rho, var));
                    track.inv_depth_mean = fused.0;
                    track.inv_depth_var = fused.1;
                    track.status = if is_mature(fused.0, fused.1, cfg) {
                        TrackStatus::Mature
                    } else {
                        TrackStatus::Immature
                    };
                }
                // Negative parallax-free measurements carry no usable depth.
                Ok(_) | Err(GeometryError::DegenerateBaseline { .. }) => {}
                Err(_) => unreachable!("triangulation only fails on degenerate baselines"),
            }
            true
        });
    }

    /// Adds candidates, in the given order, to tiles that are below the
    /// per-tile cap. Candidates inside the bounding box, outside the ROI or
    /// already tracked are skipped; starved tiles simply stay under-filled.
    pub fn replenish_tracks(
        &mut self,
        grid: &RoiGrid,
        candidates: &[(u64, Vec2)],
        pose: &Pose,
        cfg: &RoiConfig,
    ) {
        let mut occupancy = [0usize; 9];
        for t in &self.tracks {
            if let Some(i) = grid.tile_of(t.current_pixel) {
                occupancy[i] += 1;
            }
        }
        for &(id, px) in candidates {
            let Some(tile) = grid.tile_of(px) else {
                continue;
            };
            if occupancy[tile] >= cfg.max_per_tile || self.contains(id) {
                continue;
            }
            occupancy[tile] += 1;
            self.tracks.push(FeatureTrack {
                id,
                first_pixel: px,
                first_pose: *pose,
                current_pixel: px,
                inv_depth_mean: cfg.prior_mean,
                inv_depth_var: cfg.prior_var,
                status: TrackStatus::Immature,
            });
        }
    }

    /// World points of all mature tracks, backprojected at the fused inverse
    /// depth from their first observation.
    pub fn mature_points(&self, intr: &Intrinsics) -> Vec<(u64, Vec3)> {
        self.tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Mature)
            .filter_map(|t| {
                backproject(t.first_pixel, t.inv_depth_mean, &t.first_pose, intr)
                    .ok()
                    .map(|p| (t.id, p))
            })
            .collect()
    }

    pub fn mature_count(&self) -> usize {
        self.tracks.iter().filter(|t| t.status == TrackStatus::Mature).count()
    }
}

fn is_mature(mean: f64, var: f64, cfg: &RoiConfig) -> bool {
    mean > 0.0 && var.sqrt() <= cfg.promotion_rel_sigma * mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;

    fn intr() -> Intrinsics {
        Intrinsics::new(400.0, 400.0, 512.0, 512.0, 1024, 1024)
    }

    fn bbox_at(x: f64, y: f64) -> BoundingBox {
        BoundingBox::new(Vec2::new(x, y), 60.0, 40.0)
    }

    #[test]
    fn grid_center_tile_is_the_bbox_and_margins_scale_with_min_side() {
        let b = bbox_at(512.0, 512.0);
        let g = update_roi(&b, 2.0, &intr()).unwrap();
        let center = g.tiles()[CENTER_TILE];
        assert_abs_diff_eq!(center.min, b.min(), epsilon = 1e-12);
        assert_abs_diff_eq!(center.max, b.max(), epsilon = 1e-12);
        // Margin = 2 * min(60, 40) = 80 on every side.
        let roi = g.roi_rect();
        assert_abs_diff_eq!(roi.min, Vec2::new(482.0 - 80.0, 492.0 - 80.0), epsilon = 1e-12);
        assert_abs_diff_eq!(roi.max, Vec2::new(542.0 + 80.0, 532.0 + 80.0), epsilon = 1e-12);
    }

    #[test]
    fn grid_clamps_at_image_corner_without_touching_inner_tiles() {
        let b = BoundingBox::new(Vec2::new(30.0, 20.0), 60.0, 40.0);
        let g = update_roi(&b, 2.0, &intr()).unwrap();
        // Tiles left of / above the box are clamped to zero area.
        assert_eq!(g.tiles()[0].area(), 0.0);
        assert_eq!(g.tiles()[3].area(), 0.0);
        // The box and the tiles to its right keep their full extent.
        assert_abs_diff_eq!(g.tiles()[CENTER_TILE].area(), 60.0 * 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.tiles()[5].area(), 80.0 * 40.0, epsilon = 1e-12);
    }

    #[test]
    fn roi_fully_outside_image_errors() {
        let b = BoundingBox::new(Vec2::new(-200.0, 512.0), 60.0, 40.0);
        assert_eq!(update_roi(&b, 2.0, &intr()).unwrap_err(), RoiError::RoiOutsideImage);
    }

    #[test]
    fn fuse_matches_closed_form_product_of_gaussians() {
        // Independent route: textbook product of two Gaussian densities.
        let (m0, v0, m1, v1) = (0.08, 4e-4, 0.11, 1e-4);
        let closed_mean = (m0 * v1 + m1 * v0) / (v0 + v1);
        let closed_var = 1.0 / (1.0 / v0 + 1.0 / v1);
        let (mean, var) = fuse_inverse_depth((m0, v0), (m1, v1));
        assert_abs_diff_eq!(mean, closed_mean, epsilon = 1e-12);
        assert_abs_diff_eq!(var, closed_var, epsilon = 1e-12);
        assert!(var < v0.min(v1));
    }

    #[test]
    fn fusion_is_commutative_and_tightens_variance() {
        let a = (0.05, 2e-3);
        let b = (0.07, 5e-4);
        let ab = fuse_inverse_depth(a, b);
        let ba = fuse_inverse_depth(b, a);
        assert_abs_diff_eq!(ab.0, ba.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ab.1, ba.1, epsilon = 1e-15);
        assert!(ab.1 < a.1 && ab.1 < b.1);
    }

    fn obs(entries: &[(u64, Vec2)]) -> HashMap<u64, Vec2> {
        entries.iter().copied().collect()
    }

    #[test]
    fn replenish_respects_cap_and_rejects_bbox_candidates() {
        let b = bbox_at(512.0, 512.0);
        let g = update_roi(&b, 2.0, &intr()).unwrap();
        let cfg = RoiConfig { max_per_tile: 3, ..RoiConfig::default() };
        let mut tracker = RoiTracker::new();
        // Tile above the box spans y in [412, 492); flood it plus one
        // candidate inside the box and one outside the ROI.
        let mut candidates: Vec<(u64, Vec2)> =
            (0..6).map(|i| (i, Vec2::new(500.0 + i as f64, 450.0))).collect();
        candidates.push((100, Vec2::new(512.0, 512.0))); // inside bbox
        candidates.push((101, Vec2::new(10.0, 10.0))); // outside ROI
        tracker.replenish_tracks(&g, &candidates, &Pose::identity(), &cfg);
        assert_eq!(tracker.len(), 3);
        assert!(!tracker.contains(100));
        assert!(!tracker.contains(101));
        // Re-running with the same candidates adds nothing.
        tracker.replenish_tracks(&g, &candidates, &Pose::identity(), &cfg);
        assert_eq!(tracker.len(), 3);
    }

    #[test]
    fn unobserved_and_out_of_roi_tracks_are_dropped() {
        let g = update_roi(&bbox_at(512.0, 512.0), 2.0, &intr()).unwrap();
        let cfg = RoiConfig::default();
        let mut tracker = RoiTracker::new();
        tracker.replenish_tracks(
            &g,
            &[(1, Vec2::new(500.0, 450.0)), (2, Vec2::new(540.0, 450.0))],
            &Pose::identity(),
            &cfg,
        );
        let pose = Pose::new(Rotation3::identity(), Vec3::new(0.5, 0.0, 0.0));
        // Track 1 unobserved, track 2 observed far outside the ROI.
        tracker.step_tracks(&obs(&[(2, Vec2::new(10.0, 10.0))]), &pose, &intr(), &g, &cfg);
        assert!(tracker.is_empty());
    }

    #[test]
    fn hover_keeps_estimates_unchanged() {
        let g = update_roi(&bbox_at(512.0, 512.0), 2.0, &intr()).unwrap();
        let cfg = RoiConfig::default();
        let mut tracker = RoiTracker::new();
        tracker.replenish_tracks(&g, &[(1, Vec2::new(500.0, 450.0))], &Pose::identity(), &cfg);
        let before = tracker.tracks()[0].clone();
        let hover = Pose::new(Rotation3::identity(), Vec3::new(1e-4, 0.0, 0.0));
        tracker.step_tracks(&obs(&[(1, Vec2::new(500.02, 450.0))]), &hover, &intr(), &g, &cfg);
        let after = &tracker.tracks()[0];
        assert_eq!(after.inv_depth_mean, before.inv_depth_mean);
        assert_eq!(after.inv_depth_var, before.inv_depth_var);
        assert_eq!(after.status, TrackStatus::Immature);
    }

    #[test]
    fn tracks_mature_under_translating_camera_and_backproject_to_truth() {
        let camera = intr();
        let cfg = RoiConfig::default();
        // Static world point 20 m in front of the strafing camera.
        let world = Vec3::new(0.5, -0.3, 20.0);
        let mut pose = Pose::identity();
        let first_px = crate::geometry::project(world, &pose, &camera).unwrap();
        let bbox = BoundingBox::new(first_px + Vec2::new(120.0, 0.0), 60.0, 60.0);
        let g = update_roi(&bbox, 2.0, &camera).unwrap();
        let mut tracker = RoiTracker::new();
        tracker.replenish_tracks(&g, &[(7, first_px)], &pose, &cfg);

        for k in 1..=10 {
            pose = Pose::new(Rotation3::identity(), Vec3::new(0.1 * k as f64, 0.0, 0.0));
            let px = crate::geometry::project(world, &pose, &camera).unwrap();
            tracker.step_tracks(&obs(&[(7, px)]), &pose, &camera, &g, &cfg);
        }
        let track = &tracker.tracks()[0];
        assert_eq!(track.status, TrackStatus::Mature);
        assert_abs_diff_eq!(track.inv_depth_mean, 1.0 / 20.0, epsilon = 1e-9);
        let pts = tracker.mature_points(&camera);
        assert_eq!(pts.len(), 1);
        assert_abs_diff_eq!(pts[0].1, world, epsilon = 1e-6);
    }

    #[test]
    fn promotion_threshold_is_five_percent_of_mean() {
        let cfg = RoiConfig::default();
        assert!(is_mature(0.05, 1e-6, &cfg)); // sigma 1e-3 <= 2.5e-3
        assert!(!is_mature(0.05, 1e-5, &cfg)); // sigma ~3.2e-3 > 2.5e-3
        assert!(!is_mature(-0.05, 1e-9, &cfg)); // negative depth never matures
    }
}
