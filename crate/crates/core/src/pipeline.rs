//! Per-frame orchestration: peak selection on a detector score window,
//! ROI feature tracking, depth scale recovery, ground segmentation,
//! multi-plane fitting with temporal fusion, ray-plane localization and
//! the trajectory filter — with every fallback wired so a frame never
//! errors, it only degrades.
//!
//! The loop splits into a front end (window placement, peak selection,
//! trajectory filter) and a back end (everything that needs the depth
//! map). They can run on separate threads exchanging snapshots; with a
//! zero-latency back end the threaded run is bit-identical to the
//! sequential one.

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::Arc;

use crate::geometry::{backproject, ray_through_pixel, Intrinsics, Plane, Ray, Vec2, Vec3};
use crate::grid::Grid;
use crate::localizer::{localize, LocalizerConfig, TargetFix};
use crate::peak::{
    center_window, find_peaks, select_peak, softmax_normalize, PeakConfig, ScoreMap, ScoreWindow,
};
use crate::planes::{
    multi_ransac, select_flattest, temporal_update, FusedPlaneModel, PlaneBuffer, PlaneHypothesis,
    TemporalConfig,
};
use crate::roi::{update_roi, BoundingBox, RoiConfig, RoiTracker};
use crate::scale::{
    apply_affine, fit_affine_lsq, fit_affine_ransac, AffineParams, AffineRansacConfig, DepthPair,
};
use crate::segmentation::{segment_ground, SegmentationConfig};
use crate::sim::{FrameBundle, Scene};
use crate::trajectory::{predict_pixel, TrajectoryConfig, TrajectoryFilter};

/// Supplies detector responses over a requested window. The simulator
/// implements this; recorded score-map dumps can too.
pub trait ResponseSource {
    fn response(&self, frame: usize, window: &ScoreWindow) -> ScoreMap;
}

impl ResponseSource for Scene {
    fn response(&self, frame: usize, window: &ScoreWindow) -> ScoreMap {
        self.render_response(frame, window)
    }
}

/// How the relative-to-metric affine map is fit each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMethod {
    Ransac,
    LeastSquares,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Ground segmentation gates the plane-fit features.
    pub mask_on: bool,
    /// Maintain and prefer the temporally fused plane model.
    pub temporal_fusion_on: bool,
    /// Window placement and peak choice follow the trajectory prediction;
    /// off = plain argmax around the previous selection.
    pub guided_selection_on: bool,
    /// Lift the ground plane by the object height before intersecting.
    pub lift_on: bool,
    /// Bypass peak selection and take the frame's reference bbox (isolates
    /// localization accuracy).
    pub use_gt_bbox: bool,
    /// Score window extent (cells per side) and pixel stride.
    pub window_cells: usize,
    pub window_stride: f64,
    /// Peak maxima below this raw response count as "no candidates".
    pub min_response: f64,
    /// Consecutive no-candidate frames before the track counts as lost.
    pub loss_after: usize,
    /// Smoothing factor of the running object-height estimate.
    pub height_ema: f64,
    pub seed: u64,
    pub scale_method: ScaleMethod,
    pub roi: RoiConfig,
    pub scale: AffineRansacConfig,
    pub segmentation: SegmentationConfig,
    pub temporal: TemporalConfig,
    pub trajectory: TrajectoryConfig,
    pub peak: PeakConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        // Pose jitter, not the feature detector, dominates the pixel error
        // budget of an airborne camera; propagating it as extra pixel noise
        // keeps depths from "maturing" on hover-level baselines where the
        // systematic error is still meters.
        let mut roi = RoiConfig::default();
        roi.triangulation.pixel_sigma = 3.0;
        // Promote late: depth error scales with the square of the relative
        // sigma, so waiting for 1.5% keeps the long-depth bias of maturing
        // points a few centimeters even at long stand-off ranges.
        roi.promotion_rel_sigma = 0.015;
        // Pose jitter moves the whole frame's cloud coherently, so the
        // fused plane has to average over many frames to see through it; a
        // deep buffer with a cheaper per-frame refit buys that at the same
        // cost as a shallow buffer with an expensive one.
        let mut temporal = TemporalConfig::default();
        temporal.buffer_capacity = 6000;
        temporal.ransac.iterations = 150;
        Self {
            mask_on: true,
            temporal_fusion_on: true,
            guided_selection_on: true,
            lift_on: true,
            use_gt_bbox: false,
            window_cells: 61,
            window_stride: 4.0,
            min_response: 0.25,
            loss_after: 3,
            height_ema: 0.95,
            seed: 0,
            scale_method: ScaleMethod::Ransac,
            roi,
            scale: AffineRansacConfig::default(),
            segmentation: SegmentationConfig::default(),
            temporal,
            trajectory: TrajectoryConfig::default(),
            peak: PeakConfig::default(),
        }
    }
}

/// Everything one processed frame reports.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub frame: usize,
    pub time: f64,
    /// Center of the score window this frame searched.
    pub window_center: Option<Vec2>,
    pub selected_pixel: Option<Vec2>,
    pub bbox: Option<BoundingBox>,
    pub fix: Option<TargetFix>,
    /// Trajectory prediction for this frame (before any update).
    pub predicted_position: Option<Vec3>,
    pub predicted_pixel: Option<Vec2>,
    /// Filter state after this frame's update (if any) was applied.
    pub filter_position: Option<Vec3>,
    pub filter_velocity: Option<Vec3>,
    pub covariance_trace: Option<f64>,
    /// This frame's relative-to-metric depth map parameters, when fit.
    pub affine: Option<AffineParams>,
    pub segmentation_failed: bool,
    /// The fix (if any) came from a degraded path: segmentation, scale or
    /// the fresh fit was unavailable.
    pub fallback_used: bool,
    pub scale_failed: bool,
    pub tracking_lost: bool,
    pub reacquired: bool,
}

fn mix_seed(seed: u64, frame: usize, stream: u64) -> u64 {
    seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Front end: window placement, peak selection, loss bookkeeping and the
/// trajectory filter.
struct FrontEnd {
    filter: TrajectoryFilter,
    prev_center: Option<Vec2>,
    bbox_size: Option<(f64, f64)>,
    last_time: Option<f64>,
    misses: usize,
    lost: bool,
}

struct FrontOut {
    window_center: Option<Vec2>,
    selected: Option<Vec2>,
    bbox: Option<BoundingBox>,
    predicted_position: Option<Vec3>,
    predicted_pixel: Option<Vec2>,
    tracking_lost: bool,
    reacquired: bool,
}

impl FrontEnd {
    fn new(cfg: &PipelineConfig) -> Self {
        Self {
            filter: TrajectoryFilter::new(cfg.trajectory.clone()),
            prev_center: None,
            bbox_size: None,
            last_time: None,
            misses: 0,
            lost: false,
        }
    }

    fn step(
        &mut self,
        bundle: &FrameBundle,
        source: &dyn ResponseSource,
        intr: &Intrinsics,
        cfg: &PipelineConfig,
    ) -> FrontOut {
        if let Some(prev) = self.last_time {
            let dt = bundle.time - prev;
            if dt > 0.0 {
                self.filter.predict(dt);
            }
        }
        self.last_time = Some(bundle.time);
        let predicted_position = self.filter.is_initialized().then(|| self.filter.position());
        let predicted_pixel =
            predicted_position.and_then(|p| predict_pixel(p, &bundle.noisy_pose, intr));

        // The detector box supplies the extent; our selection supplies the
        // center.
        if let Some(b) = &bundle.gt_bbox {
            self.bbox_size = Some((b.width, b.height));
        }

        if cfg.use_gt_bbox {
            let bbox = bundle.gt_bbox;
            if let Some(b) = &bbox {
                self.prev_center = Some(b.center);
            }
            return FrontOut {
                window_center: bbox.as_ref().map(|b| b.center),
                selected: bbox.as_ref().map(|b| b.center),
                bbox,
                predicted_position,
                predicted_pixel,
                tracking_lost: false,
                reacquired: false,
            };
        }

        // First frame: a full-image detection initializes the track.
        if self.prev_center.is_none() {
            match &bundle.score_map {
                Some(map) => self.prev_center = Some(map.window.center()),
                None => {
                    return FrontOut {
                        window_center: None,
                        selected: None,
                        bbox: None,
                        predicted_position,
                        predicted_pixel,
                        tracking_lost: false,
                        reacquired: false,
                    }
                }
            }
        }
        let previous = self.prev_center.expect("initialized above");
        let guidance = if cfg.guided_selection_on { predicted_pixel } else { None };
        let window = center_window(
            guidance,
            previous,
            (cfg.window_cells, cfg.window_cells),
            cfg.window_stride,
            intr,
        );
        let map = source.response(bundle.frame, &window);

        let mut miss = map.max_raw().is_none_or(|m| (m as f64) < cfg.min_response);
        let mut selected = None;
        if !miss {
            let probs = softmax_normalize(&map);
            let peaks = find_peaks(&map, &probs, &cfg.peak);
            let reference = if cfg.guided_selection_on {
                predicted_pixel.unwrap_or_else(|| window.center())
            } else {
                // Plain argmax: peaks come ordered by score.
                window.center()
            };
            let choice = if cfg.guided_selection_on {
                select_peak(&peaks, reference).ok()
            } else {
                peaks.first()
            };
            match choice {
                Some(p) => selected = Some(p.pixel),
                None => miss = true,
            }
        }

        if miss {
            self.misses += 1;
            if self.misses >= cfg.loss_after {
                self.lost = true;
            }
            return FrontOut {
                window_center: Some(window.center()),
                selected: None,
                bbox: None,
                predicted_position,
                predicted_pixel,
                tracking_lost: self.lost,
                reacquired: false,
            };
        }

        let reacquired = self.lost;
        self.misses = 0;
        self.lost = false;
        let sel = selected.expect("miss handled above");
        self.prev_center = Some(sel);
        let bbox = self
            .bbox_size
            .map(|(w, h)| BoundingBox::new(sel, w.max(1.0), h.max(1.0)));
        FrontOut {
            window_center: Some(window.center()),
            selected,
            bbox,
            predicted_position,
            predicted_pixel,
            tracking_lost: false,
            reacquired,
        }
    }
}

/// Back end: ROI tracking, scale recovery, segmentation, plane fitting,
/// temporal fusion and localization.
struct BackEnd {
    roi: RoiTracker,
    buffer: PlaneBuffer,
    fused: FusedPlaneModel,
    /// Running estimate of the full object height over its ground plane.
    object_height: Option<f64>,
}

#[derive(Debug, Clone)]
struct BackOut {
    frame: usize,
    fix: Option<TargetFix>,
    affine: Option<AffineParams>,
    segmentation_failed: bool,
    scale_failed: bool,
    fallback_used: bool,
}

impl BackOut {
    fn empty(frame: usize) -> Self {
        Self {
            frame,
            fix: None,
            affine: None,
            segmentation_failed: false,
            scale_failed: false,
            fallback_used: false,
        }
    }
}

impl BackEnd {
    fn new(cfg: &PipelineConfig) -> Self {
        Self {
            roi: RoiTracker::new(),
            buffer: PlaneBuffer::new(cfg.temporal.buffer_capacity),
            fused: FusedPlaneModel::invalid(),
            object_height: None,
        }
    }

    fn step(
        &mut self,
        bundle: &FrameBundle,
        bbox: &BoundingBox,
        intr: &Intrinsics,
        map_intr: &Intrinsics,
        cfg: &PipelineConfig,
    ) -> BackOut {
        let mut out = BackOut::empty(bundle.frame);
        let pose = &bundle.noisy_pose;
        let ray = ray_through_pixel(bbox.center, pose, intr);

        let grid = match update_roi(bbox, cfg.roi.margin_factor, intr) {
            Ok(g) => g,
            Err(_) => {
                // ROI off-screen: localize against the existing models only.
                out.fallback_used = true;
                out.fix = localize(
                    &ray,
                    None,
                    &self.fused,
                    &[],
                    self.lift_height(cfg),
                    &self.localizer_cfg(cfg),
                )
                .ok();
                return out;
            }
        };

        let observations: HashMap<u64, Vec2> =
            bundle.observations.iter().map(|o| (o.id, o.pixel)).collect();
        self.roi.step_tracks(&observations, pose, intr, &grid, &cfg.roi);
        let candidates: Vec<(u64, Vec2)> =
            bundle.observations.iter().map(|o| (o.id, o.pixel)).collect();
        self.roi.replenish_tracks(&grid, &candidates, pose, &cfg.roi);

        let mature = self.roi.mature_points(intr);
        let current_px: HashMap<u64, Vec2> =
            self.roi.tracks().iter().map(|t| (t.id, t.current_pixel)).collect();

        // Scale recovery: pair the relative map value under each mature
        // track with the track's metric inverse depth in this frame.
        let ds = (intr.width / map_intr.width) as f64;
        let mut pairs = Vec::new();
        for (id, p) in &mature {
            let Some(&px) = current_px.get(id) else { continue };
            let cell = px / ds;
            let (c, r) = (cell.x as usize, cell.y as usize);
            if r >= bundle.rel_depth.height() || c >= bundle.rel_depth.width() {
                continue;
            }
            let rel = bundle.rel_depth.get(r, c);
            if !rel.is_finite() {
                continue;
            }
            let z = pose.to_camera(*p).z;
            if z > 0.0 {
                pairs.push(DepthPair::new(rel, 1.0 / z));
            }
        }
        let affine: Option<AffineParams> = match cfg.scale_method {
            ScaleMethod::Ransac => {
                fit_affine_ransac(&pairs, &cfg.scale, mix_seed(cfg.seed, bundle.frame, 1))
                    .ok()
                    .map(|(p, _)| p)
            }
            ScaleMethod::LeastSquares => fit_affine_lsq(&pairs).ok(),
        };
        out.scale_failed = affine.is_none();
        out.affine = affine;
        let metric = affine.as_ref().map(|params| apply_affine(&bundle.rel_depth, params));
        let bbox_map = BoundingBox::new(
            bbox.center / ds,
            (bbox.width / ds).max(1e-6),
            (bbox.height / ds).max(1e-6),
        );

        // Segmentation gates which mature points feed the plane fit. The
        // bbox's mean world height also feeds the running object-height
        // estimate (the unmasked path reads it off the map directly).
        let mut fit_ids: Option<Vec<u64>> = None;
        let mut object_level: Option<f64> = None;
        if cfg.mask_on {
            match &metric {
                Some(metric_map) => {
                    let tracks_map: Vec<(u64, Vec2)> = self
                        .roi
                        .tracks()
                        .iter()
                        .map(|t| (t.id, t.current_pixel / ds))
                        .collect();
                    match segment_ground(
                        metric_map,
                        map_intr,
                        pose,
                        &bbox_map,
                        &tracks_map,
                        &cfg.segmentation,
                    ) {
                        Ok(seg) => {
                            fit_ids = Some(seg.selected_ids.clone());
                            object_level = Some(seg.object_level);
                        }
                        Err(_) => out.segmentation_failed = true,
                    }
                }
                None => out.segmentation_failed = true,
            }
        } else if let Some(metric_map) = &metric {
            object_level = bbox_level(metric_map, map_intr, pose, &bbox_map);
        }

        // With the mask required but unavailable, never fresh-fit the
        // unmasked cloud — fall back to the fused model instead.
        let fit_points: Vec<Vec3> = if out.segmentation_failed {
            Vec::new()
        } else {
            match &fit_ids {
                Some(ids) => mature
                    .iter()
                    .filter(|(id, _)| ids.contains(id))
                    .map(|&(_, p)| p)
                    .collect(),
                None => mature.iter().map(|&(_, p)| p).collect(),
            }
        };

        let mut hypotheses: Vec<PlaneHypothesis> = Vec::new();
        let mut fresh: Option<Plane> = None;
        if fit_points.len() >= 3 {
            if let Ok(hyps) =
                multi_ransac(&fit_points, &cfg.temporal.ransac, mix_seed(cfg.seed, bundle.frame, 2))
            {
                if let Some(i) = select_flattest(&hyps, crate::geometry::WORLD_UP) {
                    fresh = Some(hyps[i].plane);
                }
                hypotheses = hyps;
            }
        }

        if cfg.temporal_fusion_on && !fit_points.is_empty() {
            let fused_hyps = temporal_update(
                &mut self.buffer,
                &mut self.fused,
                &fit_points,
                bundle.frame as u64,
                &cfg.temporal,
                mix_seed(cfg.seed, bundle.frame, 3),
            );
            if self.fused.valid && !fused_hyps.is_empty() {
                hypotheses = fused_hyps;
            }
        }

        // Height over ground needs a plane; refresh it now that one exists.
        if let Some(level) = object_level {
            self.update_height(level, &ray, fresh.as_ref(), cfg);
        }

        out.fallback_used = out.segmentation_failed || fresh.is_none();
        out.fix = localize(
            &ray,
            fresh.as_ref(),
            &self.fused,
            &hypotheses,
            self.lift_height(cfg),
            &self.localizer_cfg(cfg),
        )
        .ok();
        out
    }

    fn localizer_cfg(&self, cfg: &PipelineConfig) -> LocalizerConfig {
        LocalizerConfig { lift_on: cfg.lift_on, prefer_fused: cfg.temporal_fusion_on }
    }

    fn lift_height(&self, cfg: &PipelineConfig) -> f64 {
        if cfg.lift_on {
            self.object_height.unwrap_or(0.0)
        } else {
            0.0
        }
    }

    /// Smooths the object's level estimate into a full height over the
    /// currently believed ground plane and keeps an EMA of it. The lift
    /// wants the FULL height (it raises the plane by half of it), and the
    /// level estimate sits at the object's center, so the height is twice
    /// the clearance.
    fn update_height(
        &mut self,
        object_level: f64,
        ray: &Ray,
        fresh: Option<&Plane>,
        cfg: &PipelineConfig,
    ) {
        if !object_level.is_finite() {
            return;
        }
        // Measure the ground with the same plane the localizer is about to
        // raycast, so its z error cancels between the hit and the lift.
        let fused = self.fused.valid.then_some(&self.fused.plane);
        let preferred = if cfg.temporal_fusion_on { fused.or(fresh) } else { fresh.or(fused) };
        let Some(plane) = preferred else { return };
        let Ok((ground, _)) = crate::geometry::raycast_plane(ray, plane) else { return };
        let h = (2.0 * (object_level - ground.z)).clamp(0.0, 20.0);
        self.object_height = Some(match self.object_height {
            Some(prev) => cfg.height_ema * prev + (1.0 - cfg.height_ema) * h,
            None => h,
        });
    }
}

/// Median world z of the metric inverse-depth cells whose centers fall in
/// the bbox (all in map coordinates). The median keeps the background ring
/// inside the rectangular box from dragging the level toward the ground.
fn bbox_level(
    metric: &Grid<f64>,
    map_intr: &Intrinsics,
    pose: &crate::geometry::Pose,
    bbox: &BoundingBox,
) -> Option<f64> {
    let mut zs = Vec::new();
    let r0 = (bbox.center.y - bbox.height / 2.0).floor().max(0.0) as usize;
    let r1 = ((bbox.center.y + bbox.height / 2.0).ceil() as usize).min(metric.height());
    let c0 = (bbox.center.x - bbox.width / 2.0).floor().max(0.0) as usize;
    let c1 = ((bbox.center.x + bbox.width / 2.0).ceil() as usize).min(metric.width());
    for r in r0..r1 {
        for c in c0..c1 {
            let px = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
            if !bbox.contains(px) {
                continue;
            }
            let rho = metric.get(r, c);
            if let Ok(p) = backproject(px, rho, pose, map_intr) {
                zs.push(p.z);
            }
        }
    }
    if zs.is_empty() {
        return None;
    }
    zs.sort_by(f64::total_cmp);
    let mid = zs.len() / 2;
    Some(if zs.len() % 2 == 1 { zs[mid] } else { 0.5 * (zs[mid - 1] + zs[mid]) })
}

/// The assembled tracker-localizer. Owns both halves; `process_frame`
/// runs them back to back (zero-latency path).
pub struct Pipeline {
    cfg: PipelineConfig,
    intr: Intrinsics,
    map_intr: Intrinsics,
    front: FrontEnd,
    back: BackEnd,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, intr: Intrinsics, map_intr: Intrinsics) -> Self {
        let front = FrontEnd::new(&cfg);
        let back = BackEnd::new(&cfg);
        Self { cfg, intr, map_intr, front, back }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn apply_back(&mut self, out: &BackOut, result: &mut FrameResult) {
        if let Some(fix) = &out.fix {
            self.front.filter.update(fix.position, fix.depth_sigma);
        }
        result.fix = out.fix.clone();
        result.affine = out.affine;
        result.segmentation_failed = out.segmentation_failed;
        result.scale_failed = out.scale_failed;
        result.fallback_used = out.fallback_used;
        self.snapshot_filter(result);
    }

    fn snapshot_filter(&self, result: &mut FrameResult) {
        if self.front.filter.is_initialized() {
            result.filter_position = Some(self.front.filter.position());
            result.filter_velocity = Some(self.front.filter.velocity());
            result.covariance_trace = Some(self.front.filter.covariance().trace());
        }
    }

    fn front_result(&self, bundle: &FrameBundle, front: &FrontOut) -> FrameResult {
        FrameResult {
            frame: bundle.frame,
            time: bundle.time,
            window_center: front.window_center,
            selected_pixel: front.selected,
            bbox: front.bbox,
            fix: None,
            predicted_position: front.predicted_position,
            predicted_pixel: front.predicted_pixel,
            filter_position: None,
            filter_velocity: None,
            covariance_trace: None,
            affine: None,
            segmentation_failed: false,
            fallback_used: false,
            scale_failed: false,
            tracking_lost: front.tracking_lost,
            reacquired: front.reacquired,
        }
    }

    /// Sequential processing of one frame.
    pub fn process_frame(
        &mut self,
        bundle: &FrameBundle,
        source: &dyn ResponseSource,
    ) -> FrameResult {
        let front = self.front.step(bundle, source, &self.intr, &self.cfg);
        let mut result = self.front_result(bundle, &front);
        if let Some(bbox) = &front.bbox {
            let out = self.back.step(bundle, bbox, &self.intr, &self.map_intr, &self.cfg);
            self.apply_back(&out, &mut result);
        } else {
            self.snapshot_filter(&mut result);
        }
        result
    }

    /// Runs every frame of a scene sequentially.
    pub fn run_scene(&mut self, scene: &Scene) -> Vec<FrameResult> {
        (0..scene.frames()).map(|k| self.process_frame(&scene.render_frame(k), scene)).collect()
    }

    /// Threaded run: the back end lives on its own thread and replies
    /// `latency_frames` frames behind the front end. Zero latency blocks
    /// per frame and reproduces [`Self::run_scene`] exactly.
    pub fn run_scene_concurrent(&mut self, scene: &Scene, latency_frames: usize) -> Vec<FrameResult> {
        let n = scene.frames();
        let mut results: Vec<FrameResult> = Vec::with_capacity(n);

        let (job_tx, job_rx) = mpsc::channel::<(Arc<FrameBundle>, BoundingBox)>();
        let (out_tx, out_rx) = mpsc::channel::<BackOut>();
        let cfg = self.cfg.clone();
        let intr = self.intr;
        let map_intr = self.map_intr;
        let mut back = std::mem::replace(&mut self.back, BackEnd::new(&cfg));

        std::thread::scope(|scope| {
            let worker = scope.spawn(move || {
                while let Ok((bundle, bbox)) = job_rx.recv() {
                    let out = back.step(&bundle, &bbox, &intr, &map_intr, &cfg);
                    if out_tx.send(out).is_err() {
                        break;
                    }
                }
                back
            });

            let mut in_flight = 0usize;
            for k in 0..n {
                let bundle = Arc::new(scene.render_frame(k));
                let front = self.front.step(&bundle, scene, &self.intr, &self.cfg);
                let mut result = self.front_result(&bundle, &front);
                if let Some(bbox) = &front.bbox {
                    job_tx.send((Arc::clone(&bundle), *bbox)).expect("worker alive");
                    in_flight += 1;
                }
                if in_flight > latency_frames {
                    let out = out_rx.recv().expect("worker alive");
                    in_flight -= 1;
                    if out.frame == k {
                        self.apply_back(&out, &mut result);
                    } else {
                        // Late reply for an earlier frame: merge it there.
                        let mut earlier = results[out.frame].clone();
                        self.apply_back(&out, &mut earlier);
                        results[out.frame] = earlier;
                        self.snapshot_filter(&mut result);
                    }
                } else {
                    self.snapshot_filter(&mut result);
                }
                results.push(result);
            }
            drop(job_tx);
            while let Ok(out) = out_rx.recv() {
                let mut earlier = results[out.frame].clone();
                self.apply_back(&out, &mut earlier);
                results[out.frame] = earlier;
            }
            self.back = worker.join().expect("worker exits cleanly");
        });
        results
    }
}
