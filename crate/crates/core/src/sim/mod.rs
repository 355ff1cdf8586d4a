//! Deterministic synthetic scenes: terrain, a spline-driven ground target,
//! a camera flight that follows it, landmark observations, relative
//! inverse-depth maps warped by a hidden affine transform, and multi-peak
//! detector score maps with decoy targets.
//!
//! Everything a frame produces is a pure function of (scene spec, frame
//! index); frames can be rendered in any order or in parallel. All
//! randomness is derived from the single scene seed via per-frame,
//! per-purpose substreams.

pub mod spline;
pub mod terrain;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    project, ray_through_pixel, Intrinsics, Pose, Ray, Vec2, Vec3, WORLD_UP,
};
use crate::grid::Grid;
use crate::peak::{ScoreMap, ScoreWindow};
use crate::roi::BoundingBox;
use nalgebra::{Matrix3, Rotation3, Unit};
use spline::PathSpline;
use terrain::{SurfaceLabel, Terrain};

/// Camera model: square pixels, symmetric frustum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self { width: 1024, height: 1024, hfov_deg: 60.0 }
    }
}

/// Camera flight: its own spline, traversed at constant speed, aiming at
/// the target position of `look_lag_s` seconds ago.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    /// Absolute 3D waypoints (z included).
    pub waypoints: Vec<[f64; 3]>,
    pub speed: f64,
    pub look_lag_s: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { waypoints: vec![], speed: 3.0, look_lag_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Ground-plane waypoints; height comes from the terrain.
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
    /// Body height, m; the target center rides half of it over terrain.
    pub height: f64,
    /// Body footprint side, m (bbox projection).
    pub width: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self { waypoints: vec![], speed: 3.0, height: 2.0, width: 1.5 }
    }
}

/// A decoy runs parallel to the target, offset by `offset + drift * t` in
/// the world plane — a nonzero drift makes the pair cross.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoySpec {
    pub offset: [f64; 2],
    pub drift: [f64; 2],
}

/// Region of the relative map whose values break the global affine model
/// (single-image depth networks drift across depth discontinuities).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    /// Applies where the backing surface point has x_min <= x < x_max.
    pub x_min: f64,
    pub x_max: f64,
    pub scale: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSpec {
    /// Depth maps are rendered at image resolution / downsample.
    pub downsample: usize,
    /// Hidden affine: metric rho = theta[0] + theta[1] * relative rho.
    pub theta: [f64; 2],
    /// Gaussian noise in the relative domain.
    pub rel_noise_sigma: f64,
    /// Magnitude of the per-frame metric depth bias inside the target
    /// bbox, m (random sign, 0.5-1.5x scale each frame).
    pub bbox_corruption_m: f64,
    pub warp: Option<WarpSpec>,
}

impl Default for DepthSpec {
    fn default() -> Self {
        Self {
            downsample: 4,
            theta: [0.012, 0.06],
            rel_noise_sigma: 3e-4,
            bbox_corruption_m: 0.5,
            warp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpec {
    /// Score window side, cells.
    pub window_cells: usize,
    /// Pixels per score cell.
    pub stride: f64,
    /// Bump width, full-resolution pixels.
    pub sigma_px: f64,
    pub noise_sigma: f64,
    /// Decoy amplitude per frame, uniform in this range times the target
    /// amplitude.
    pub decoy_amp: [f64; 2],
    /// Frame ranges [start, end) where every bump collapses.
    pub occlusions: Vec<[usize; 2]>,
    /// Amplitude multiplier during occlusions.
    pub occluded_amp: f64,
}

impl Default for ResponseSpec {
    fn default() -> Self {
        Self {
            window_cells: 61,
            stride: 4.0,
            sigma_px: 6.0,
            noise_sigma: 0.02,
            decoy_amp: [0.9, 1.05],
            occlusions: vec![],
            occluded_amp: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Landmark grid spacing on the terrain, m.
    pub spacing: f64,
    /// Uniform jitter as a fraction of the spacing.
    pub jitter_frac: f64,
    /// Corridor margin around the paths, m.
    pub margin: f64,
    /// Observation noise, px.
    pub pixel_sigma: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { spacing: 0.75, jitter_frac: 0.3, margin: 45.0, pixel_sigma: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseNoiseSpec {
    pub sigma_pos: f64,
    pub sigma_rot_deg: f64,
    /// Accumulate the noise as a random walk instead of per-frame jitter.
    pub random_walk: bool,
}

impl Default for PoseNoiseSpec {
    fn default() -> Self {
        Self { sigma_pos: 0.05, sigma_rot_deg: 0.2, random_walk: false }
    }
}

/// Complete description of a synthetic scene; serializable so runs can be
/// reproduced from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub dt: f64,
    #[serde(default)]
    pub image: ImageSpec,
    pub terrain: Terrain,
    pub camera: CameraSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub decoys: Vec<DecoySpec>,
    #[serde(default)]
    pub depth: DepthSpec,
    #[serde(default)]
    pub response: ResponseSpec,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub pose_noise: PoseNoiseSpec,
}

/// One observed landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureObs {
    pub id: u64,
    pub pixel: Vec2,
    pub label: SurfaceLabel,
}

/// Everything one frame produces. The score map here is rendered around
/// the true target (what a full-image detector would return); tracking
/// runs request their own windows through the response interface instead.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub frame: usize,
    pub time: f64,
    pub true_pose: Pose,
    pub noisy_pose: Pose,
    pub target_center: Vec3,
    pub target_pixel: Option<Vec2>,
    pub gt_bbox: Option<BoundingBox>,
    pub observations: Vec<FeatureObs>,
    pub rel_depth: Grid<f64>,
    pub score_map: Option<ScoreMap>,
}

const STREAM_POSE: u64 = 1;
const STREAM_OBS: u64 = 2;
const STREAM_DEPTH: u64 = 3;
const STREAM_AMP: u64 = 4;
const STREAM_RESP: u64 = 5;
const STREAM_FEATURES: u64 = 6;

/// A built scene: immutable, renders frames on demand.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub intr: Intrinsics,
    pub map_intr: Intrinsics,
    pub terrain: Terrain,
    target_path: PathSpline,
    camera_path: PathSpline,
    features: Vec<(u64, Vec3)>,
    /// Pre-accumulated pose perturbations (supports the random-walk mode
    /// while keeping per-frame lookups pure).
    pose_offsets: Vec<(Vec3, Rotation3<f64>)>,
}

/// Catmull-Rom needs one control beyond each end; reflect the ends.
fn pad_controls(points: Vec<Vec3>) -> Vec<Vec3> {
    assert!(points.len() >= 2, "a path needs at least two waypoints");
    let first = points[0] * 2.0 - points[1];
    let last = points[points.len() - 1] * 2.0 - points[points.len() - 2];
    let mut out = Vec::with_capacity(points.len() + 2);
    out.push(first);
    out.extend(points);
    out.push(last);
    out
}

fn stream_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Base camera mount: looking at the +x horizon with world-up along the
/// image's up direction (camera x right = world -y, camera y down =
/// world -z, camera z forward = world +x).
fn mount_rotation() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ))
}

/// Camera orientation from a horizontal heading and a downward pitch.
pub fn camera_rotation(yaw: f64, pitch_down: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vec3::z_axis(), yaw)
        * mount_rotation()
        * Rotation3::from_axis_angle(&Vec3::x_axis(), -pitch_down)
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Self {
        let intr = Intrinsics::from_horizontal_fov(
            spec.image.hfov_deg,
            spec.image.width as u32,
            spec.image.height as u32,
        );
        let map_intr = intr.downsampled(spec.depth.downsample as u32);

        let terrain = spec.terrain.clone();
        let target_controls: Vec<Vec3> = spec
            .target
            .waypoints
            .iter()
            .map(|&[x, y]| Vec3::new(x, y, terrain.height_at(x, y)))
            .collect();
        let target_path = PathSpline::new(pad_controls(target_controls))
            .expect("target path needs at least two waypoints");
        let camera_controls: Vec<Vec3> =
            spec.camera.waypoints.iter().map(|&[x, y, z]| Vec3::new(x, y, z)).collect();
        let camera_path = PathSpline::new(pad_controls(camera_controls))
            .expect("camera path needs at least two waypoints");

        let features = Self::build_features(&spec, &terrain);
        let pose_offsets = Self::build_pose_offsets(&spec);
        Scene { spec, intr, map_intr, terrain, target_path, camera_path, features, pose_offsets }
    }

    fn build_features(spec: &SceneSpec, terrain: &Terrain) -> Vec<(u64, Vec3)> {
        let mut rng = stream_rng(spec.seed, 0, STREAM_FEATURES);
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &[x, y] in &spec.target.waypoints {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        for &[x, y, _] in &spec.camera.waypoints {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        let m = spec.features.margin;
        let s = spec.features.spacing;
        let j = spec.features.jitter_frac * s;
        let mut features = Vec::new();
        let mut id = 0u64;
        let cols = (((max_x - min_x) + 2.0 * m) / s).ceil() as usize;
        let rows = (((max_y - min_y) + 2.0 * m) / s).ceil() as usize;
        for r in 0..=rows {
            for c in 0..=cols {
                let x = min_x - m + c as f64 * s + rng.random_range(-j..=j);
                let y = min_y - m + r as f64 * s + rng.random_range(-j..=j);
                features.push((id, Vec3::new(x, y, terrain.height_at(x, y))));
                id += 1;
            }
        }
        features
    }

    fn build_pose_offsets(spec: &SceneSpec) -> Vec<(Vec3, Rotation3<f64>)> {
        let n = spec.pose_noise.clone();
        let pos = Normal::new(0.0, n.sigma_pos.max(f64::MIN_POSITIVE)).unwrap();
        let rot = Normal::new(0.0, n.sigma_rot_deg.to_radians().max(f64::MIN_POSITIVE)).unwrap();
        let mut out = Vec::with_capacity(spec.frames);
        let mut acc_t = Vec3::zeros();
        let mut acc_r = Rotation3::identity();
        for frame in 0..spec.frames {
            let mut rng = stream_rng(spec.seed, frame, STREAM_POSE);
            let dt = Vec3::new(pos.sample(&mut rng), pos.sample(&mut rng), pos.sample(&mut rng));
            let axis = Unit::new_normalize(Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let dr = Rotation3::from_axis_angle(&axis, rot.sample(&mut rng));
            if n.sigma_pos == 0.0 && n.sigma_rot_deg == 0.0 {
                out.push((Vec3::zeros(), Rotation3::identity()));
                continue;
            }
            if n.random_walk {
                acc_t += dt;
                acc_r = dr * acc_r;
                out.push((acc_t, acc_r));
            } else {
                out.push((dt, dr));
            }
        }
        out
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 * self.spec.dt
    }

    fn path_point(path: &PathSpline, arc: f64) -> Vec3 {
        path.at_arclength(arc.clamp(0.0, path.length())).expect("clamped arclength")
    }

    /// True target base point (on the terrain).
    pub fn target_base(&self, frame: usize) -> Vec3 {
        Self::path_point(&self.target_path, self.spec.target.speed * self.time_of(frame))
    }

    /// True target center: half the body height above the terrain.
    pub fn target_center(&self, frame: usize) -> Vec3 {
        self.target_base(frame) + WORLD_UP * (self.spec.target.height / 2.0)
    }

    /// Decoy centers this frame.
    pub fn decoy_centers(&self, frame: usize) -> Vec<Vec3> {
        let t = self.time_of(frame);
        let base = self.target_base(frame);
        self.spec
            .decoys
            .iter()
            .map(|d| {
                let x = base.x + d.offset[0] + d.drift[0] * t;
                let y = base.y + d.offset[1] + d.drift[1] * t;
                Vec3::new(x, y, self.terrain.height_at(x, y) + self.spec.target.height / 2.0)
            })
            .collect()
    }

    /// True camera pose: position from the flight spline, orientation
    /// aiming at the (lagged) target.
    pub fn true_pose(&self, frame: usize) -> Pose {
        let t = self.time_of(frame);
        let position = Self::path_point(&self.camera_path, self.spec.camera.speed * t);
        let lag = (t - self.spec.camera.look_lag_s).max(0.0);
        let look_base = Self::path_point(&self.target_path, self.spec.target.speed * lag);
        let aim = look_base + WORLD_UP * (self.spec.target.height / 2.0) - position;
        let yaw = aim.y.atan2(aim.x);
        let pitch_down = (-aim.z).atan2(aim.xy().norm());
        Pose::new(camera_rotation(yaw, pitch_down), position)
    }

    /// The pose handed to the pipeline: truth plus the configured noise.
    pub fn noisy_pose(&self, frame: usize) -> Pose {
        let truth = self.true_pose(frame);
        let (dt, dr) = &self.pose_offsets[frame];
        Pose::new(dr * truth.rotation(), truth.translation() + dt)
    }

    pub fn is_occluded(&self, frame: usize) -> bool {
        self.spec.response.occlusions.iter().any(|&[a, b]| frame >= a && frame < b)
    }

    /// Projection of the true target center under the true pose.
    pub fn target_pixel(&self, frame: usize) -> Option<Vec2> {
        let pose = self.true_pose(frame);
        project(self.target_center(frame), &pose, &self.intr).ok()
    }

    /// Pixel-tight box around the target body under the true pose.
    pub fn gt_bbox(&self, frame: usize) -> Option<BoundingBox> {
        let pose = self.true_pose(frame);
        let base = self.target_base(frame);
        let (w, h) = (self.spec.target.width / 2.0, self.spec.target.height);
        // Centered on the body center's projection, sized to cover every
        // corner (symmetric, so the box center is the target center).
        let center = project(base + Vec3::new(0.0, 0.0, h / 2.0), &pose, &self.intr).ok()?;
        let mut half = Vec2::new(0.5, 0.5);
        for dx in [-w, w] {
            for dy in [-w, w] {
                for dz in [0.0, h] {
                    let px = project(base + Vec3::new(dx, dy, dz), &pose, &self.intr).ok()?;
                    half = half.sup(&(px - center).abs());
                }
            }
        }
        Some(BoundingBox::new(center, 2.0 * half.x, 2.0 * half.y))
    }

    /// Landmarks visible this frame (in view, unoccluded by terrain),
    /// with Gaussian pixel noise, sorted by id.
    pub fn observations(&self, frame: usize) -> Vec<FeatureObs> {
        let pose = self.true_pose(frame);
        let origin = pose.translation();
        let mut rng = stream_rng(self.spec.seed, frame, STREAM_OBS);
        let noise = Normal::new(0.0, self.spec.features.pixel_sigma.max(f64::MIN_POSITIVE))
            .unwrap();
        let mut out = Vec::new();
        for &(id, p) in &self.features {
            let Ok(mut px) = project(p, &pose, &self.intr) else {
                continue;
            };
            if !self.intr.contains(px) {
                continue;
            }
            let to = p - origin;
            let dist = to.norm();
            let ray = Ray { origin, direction: Unit::new_normalize(to) };
            if let Some((_, range)) = self.terrain.raycast(&ray) {
                if range < dist - 1e-3 {
                    continue; // hidden behind the terrain (e.g. roof edge)
                }
            }
            if self.spec.features.pixel_sigma > 0.0 {
                px += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            out.push(FeatureObs { id, pixel: px, label: self.terrain.label_at(p) });
        }
        out
    }

    /// Relative inverse-depth map: terrain depth under the true pose,
    /// mapped through the inverse of the hidden affine, plus noise; the
    /// bbox region carries the target's (corrupted) depth instead.
    pub fn relative_depth_map(&self, frame: usize) -> Grid<f64> {
        let pose = self.true_pose(frame);
        let [theta0, theta1] = self.spec.depth.theta;
        let mut rng = stream_rng(self.spec.seed, frame, STREAM_DEPTH);
        let corruption = {
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            sign * rng.random_range(0.5..1.5) * self.spec.depth.bbox_corruption_m
        };
        let noise = Normal::new(0.0, self.spec.depth.rel_noise_sigma.max(f64::MIN_POSITIVE))
            .unwrap();
        let bbox = self.gt_bbox(frame);
        let target_center = self.target_center(frame);
        let target_depth = pose.to_camera(target_center).z;
        let ds = self.spec.depth.downsample as f64;

        let (mw, mh) = (self.map_intr.width as usize, self.map_intr.height as usize);
        let mut map = Grid::filled(mw, mh, f64::NAN);
        for r in 0..mh {
            for c in 0..mw {
                let cell_px = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
                let full_px = cell_px * ds;
                let in_bbox = bbox.as_ref().is_some_and(|b| b.contains(full_px));
                let (depth, hit_x) = if in_bbox && target_depth > 0.0 {
                    (target_depth + corruption, Some(target_center.x))
                } else {
                    let ray = ray_through_pixel(cell_px, &pose, &self.map_intr);
                    match self.terrain.raycast(&ray) {
                        Some((p, _)) => (pose.to_camera(p).z, Some(p.x)),
                        None => continue,
                    }
                };
                if depth <= 0.05 {
                    continue;
                }
                let mut rel = (1.0 / depth - theta0) / theta1;
                if self.spec.depth.rel_noise_sigma > 0.0 {
                    rel += noise.sample(&mut rng);
                }
                if let (Some(warp), Some(x)) = (&self.spec.depth.warp, hit_x) {
                    if x >= warp.x_min && x < warp.x_max {
                        rel = rel * warp.scale + warp.bias;
                    }
                }
                map.set(r, c, rel);
            }
        }
        map
    }

    /// Detector response over the given window: Gaussian bumps at the
    /// target and every decoy in front of the camera, plus pixel noise.
    /// Amplitudes are per-frame draws, independent of the window.
    pub fn render_response(&self, frame: usize, window: &ScoreWindow) -> ScoreMap {
        let pose = self.true_pose(frame);
        let mut amp_rng = stream_rng(self.spec.seed, frame, STREAM_AMP);
        let occ = if self.is_occluded(frame) { self.spec.response.occluded_amp } else { 1.0 };
        let mut bumps: Vec<(Vec2, f64)> = Vec::new();
        if let Some(px) = self.target_pixel(frame) {
            bumps.push((px, occ));
        }
        let [lo, hi] = self.spec.response.decoy_amp;
        for d in self.decoy_centers(frame) {
            let amp = amp_rng.random_range(lo..hi) * occ;
            if let Ok(px) = project(d, &pose, &self.intr) {
                bumps.push((px, amp));
            }
        }

        let mixed = self.spec.seed
            ^ window.origin.x.to_bits().rotate_left(17)
            ^ window.origin.y.to_bits().rotate_left(43);
        let mut cell_rng = stream_rng(mixed, frame, STREAM_RESP);
        let noise = Normal::new(0.0, self.spec.response.noise_sigma.max(f64::MIN_POSITIVE))
            .unwrap();
        let two_s2 = 2.0 * self.spec.response.sigma_px * self.spec.response.sigma_px;
        let mut scores = Grid::filled(window.cells.0, window.cells.1, 0.0f32);
        for r in 0..window.cells.1 {
            for c in 0..window.cells.0 {
                let px = window.pixel_of(r, c);
                let mut v = 0.0;
                for &(bpx, amp) in &bumps {
                    let d2 = (px - bpx).norm_squared();
                    v += amp * (-d2 / two_s2).exp();
                }
                if self.spec.response.noise_sigma > 0.0 {
                    v += noise.sample(&mut cell_rng);
                }
                scores.set(r, c, v as f32);
            }
        }
        ScoreMap { window: *window, scores }
    }

    /// Renders the complete frame product. The included score map uses a
    /// window centered on the true target (full-image detector proxy).
    pub fn render_frame(&self, frame: usize) -> FrameBundle {
        let true_pose = self.true_pose(frame);
        let target_pixel = self.target_pixel(frame);
        let score_map = target_pixel.map(|px| {
            let window = ScoreWindow::centered(
                px,
                (self.spec.response.window_cells, self.spec.response.window_cells),
                self.spec.response.stride,
            )
            .clamped_to(&self.intr);
            self.render_response(frame, &window)
        });
        FrameBundle {
            frame,
            time: self.time_of(frame),
            true_pose,
            noisy_pose: self.noisy_pose(frame),
            target_center: self.target_center(frame),
            target_pixel,
            gt_bbox: self.gt_bbox(frame),
            observations: self.observations(frame),
            rel_depth: self.relative_depth_map(frame),
            score_map,
        }
    }

    /// Ground-truth labels of all landmarks (id -> surface kind).
    pub fn feature_labels(&self) -> HashMap<u64, SurfaceLabel> {
        self.features.iter().map(|&(id, p)| (id, self.terrain.label_at(p))).collect()
    }

    /// True landmark position by id.
    pub fn feature_point(&self, id: u64) -> Option<Vec3> {
        self.features.iter().find(|&&(i, _)| i == id).map(|&(_, p)| p)
    }
}

/// The three canonical evaluation scenes: a flat desert with decoy
/// targets and a short occlusion, a city block where the target drives on
/// a 30 m roof while the street shows past the edge, and a mountainside
/// slope with a 65-degree path turn after 50 m.
pub fn make_ablation_suite(seed: u64) -> Vec<SceneSpec> {
    vec![desert_scene(seed), city_scene(seed), mountain_scene(seed)]
}

fn desert_scene(seed: u64) -> SceneSpec {
    let target_wp = vec![[0.0, 0.0], [22.0, 3.0], [45.0, -3.0], [68.0, 3.0], [90.0, 0.0]];
    let camera_wp =
        target_wp.iter().map(|&[x, y]| [x - 14.0, y - 6.0, 16.0]).collect::<Vec<_>>();
    SceneSpec {
        name: "desert".into(),
        seed,
        frames: 400,
        dt: 0.05,
        image: ImageSpec::default(),
        terrain: Terrain::Planar { height: 0.0 },
        camera: CameraSpec { waypoints: camera_wp, speed: 3.0, look_lag_s: 1.0 },
        target: TargetSpec { waypoints: target_wp, ..TargetSpec::default() },
        decoys: vec![
            DecoySpec { offset: [5.0, 4.0], drift: [-0.5, -0.4] },
            DecoySpec { offset: [-4.5, 3.5], drift: [0.45, -0.35] },
        ],
        depth: DepthSpec::default(),
        response: ResponseSpec { occlusions: vec![[40, 48]], ..ResponseSpec::default() },
        features: FeatureSpec::default(),
        pose_noise: PoseNoiseSpec::default(),
    }
}

fn city_scene(seed: u64) -> SceneSpec {
    // The camera flies 10 m onto the roof side of the edge, 32 m above
    // the roof, while the target walks the street below; its line of
    // sight grazes the roof edge, so street and roof are image neighbors.
    // The near street band behind the edge is shadowed.
    let target_wp = vec![[2.0, 0.0], [1.4, 18.0], [2.4, 36.0], [1.5, 54.0], [2.0, 70.0]];
    let camera_wp =
        target_wp.iter().map(|&[_, y]| [22.0, y - 5.0, 30.0 + 32.0]).collect::<Vec<_>>();
    SceneSpec {
        name: "city".into(),
        seed,
        frames: 400,
        dt: 0.05,
        image: ImageSpec::default(),
        terrain: Terrain::Step { ground_height: 0.0, roof_height: 30.0, edge_x: 12.0 },
        camera: CameraSpec { waypoints: camera_wp, speed: 3.0, look_lag_s: 1.0 },
        target: TargetSpec { waypoints: target_wp, ..TargetSpec::default() },
        decoys: vec![],
        depth: DepthSpec {
            downsample: 2,
            theta: [0.010, 0.05],
            rel_noise_sigma: 1e-4,
            ..DepthSpec::default()
        },
        response: ResponseSpec::default(),
        features: FeatureSpec::default(),
        pose_noise: PoseNoiseSpec::default(),
    }
}

fn mountain_scene(seed: u64) -> SceneSpec {
    // Contour along the slope for 50 m, then a 65-degree turn uphill.
    let turn = 65f64.to_radians();
    let mut target_wp = vec![[10.0, 0.0], [10.0, 25.0], [10.0, 50.0]];
    let dir = [turn.sin(), turn.cos()];
    for k in 1..=3 {
        let d = 14.0 * k as f64;
        target_wp.push([10.0 + dir[0] * d, 50.0 + dir[1] * d]);
    }
    let terrain = Terrain::Slope { base_height: 0.0, grade: 0.12 };
    let camera_wp = target_wp
        .iter()
        .map(|&[x, y]| {
            let ground = match terrain {
                Terrain::Slope { base_height, grade } => base_height + grade * (x - 12.0),
                _ => unreachable!(),
            };
            [x - 12.0, y - 8.0, ground + 30.0]
        })
        .collect::<Vec<_>>();
    SceneSpec {
        name: "mountain".into(),
        seed,
        frames: 400,
        dt: 0.05,
        image: ImageSpec::default(),
        terrain,
        camera: CameraSpec { waypoints: camera_wp, speed: 3.0, look_lag_s: 1.0 },
        target: TargetSpec { waypoints: target_wp, ..TargetSpec::default() },
        decoys: vec![],
        depth: DepthSpec { theta: [0.011, 0.055], ..DepthSpec::default() },
        response: ResponseSpec::default(),
        // Rocky slopes track far fewer, far blurrier landmarks than desert
        // hardpan; single-frame plane fits get fragile out here.
        features: FeatureSpec { spacing: 2.4, pixel_sigma: 1.2, ..FeatureSpec::default() },
        pose_noise: PoseNoiseSpec::default(),
    }
}

/// Scene for the anti-switch experiment: two decoys converge on the
/// target around mid-run and drift away again.
pub fn make_decoy_scene(seed: u64) -> SceneSpec {
    let mut spec = desert_scene(seed);
    spec.name = "decoy_crossing".into();
    spec.response.occlusions.clear();
    spec
}

/// Two flat scenes with a warped strip in the relative depth map (the
/// kind of regional drift single-image depth networks produce). In the
/// first the target walks inside the strip, in the second beside it; the
/// strip cuts through the tracked feature region either way.
pub fn make_warp_scenes(seed: u64) -> [SceneSpec; 2] {
    let build = |name: &str, strip: [f64; 2], target_x: f64| {
        let target_wp: Vec<[f64; 2]> =
            (0..5).map(|i| [target_x, 22.5 * i as f64]).collect();
        let camera_wp =
            target_wp.iter().map(|&[x, y]| [x - 14.0, y - 6.0, 16.0]).collect::<Vec<_>>();
        SceneSpec {
            name: name.into(),
            seed,
            frames: 400,
            dt: 0.05,
            image: ImageSpec::default(),
            terrain: Terrain::Planar { height: 0.0 },
            camera: CameraSpec { waypoints: camera_wp, speed: 3.0, look_lag_s: 1.0 },
            target: TargetSpec { waypoints: target_wp, ..TargetSpec::default() },
            decoys: Vec::new(),
            depth: DepthSpec {
                bbox_corruption_m: 0.0,
                warp: Some(WarpSpec {
                    x_min: strip[0],
                    x_max: strip[1],
                    scale: 1.05,
                    bias: 0.0,
                }),
                ..DepthSpec::default()
            },
            response: ResponseSpec { occlusions: Vec::new(), ..ResponseSpec::default() },
            features: FeatureSpec::default(),
            pose_noise: PoseNoiseSpec::default(),
        }
    };
    [
        build("warp-on-path", [1.2, 2.8], 2.0),
        build("warp-off-path", [3.0, 4.6], 2.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;
    use approx::assert_abs_diff_eq;

    fn zero_noise(mut spec: SceneSpec) -> SceneSpec {
        spec.features.pixel_sigma = 0.0;
        spec.pose_noise = PoseNoiseSpec { sigma_pos: 0.0, sigma_rot_deg: 0.0, random_walk: false };
        spec.depth.rel_noise_sigma = 0.0;
        spec.depth.bbox_corruption_m = 0.0;
        spec.response.noise_sigma = 0.0;
        spec
    }

    #[test]
    fn camera_rotation_is_orthonormal_and_looks_where_told() {
        for (yaw, pitch) in [(0.0, 0.0), (1.2, 0.7), (-2.0, 1.4), (3.0, 1.5707)] {
            let r = camera_rotation(yaw, pitch);
            let fwd = r * Vec3::z();
            assert_abs_diff_eq!(fwd.z, -pitch.sin(), epsilon = 1e-12);
            assert_abs_diff_eq!(fwd.x, yaw.cos() * pitch.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(fwd.y, yaw.sin() * pitch.cos(), epsilon = 1e-12);
        }
    }

    #[test]
    fn target_stays_in_view_across_the_suite() {
        for spec in make_ablation_suite(7) {
            let scene = Scene::new(spec);
            for frame in 0..scene.frames() {
                let px = scene
                    .target_pixel(frame)
                    .unwrap_or_else(|| panic!("{}: frame {frame} behind camera", scene.spec.name));
                assert!(
                    scene.intr.contains(px),
                    "{}: frame {frame} target at {px:?} out of frame",
                    scene.spec.name
                );
            }
        }
    }

    #[test]
    fn uncorrupted_depth_maps_backproject_onto_the_terrain() {
        for spec in make_ablation_suite(3) {
            let mut spec = zero_noise(spec);
            spec.decoys.clear();
            let scene = Scene::new(spec);
            let [theta0, theta1] = scene.spec.depth.theta;
            for frame in [0, 150, 399] {
                let pose = scene.true_pose(frame);
                let map = scene.relative_depth_map(frame);
                let bbox = scene.gt_bbox(frame).unwrap();
                let ds = scene.spec.depth.downsample as f64;
                let mut checked = 0;
                for r in (0..map.height()).step_by(7) {
                    for c in (0..map.width()).step_by(7) {
                        let rel = map.get(r, c);
                        if !rel.is_finite() {
                            continue;
                        }
                        let cell_px = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
                        if bbox.contains(cell_px * ds) {
                            continue;
                        }
                        let rho = theta0 + theta1 * rel as f64;
                        let p = backproject(cell_px, rho, &pose, &scene.map_intr).unwrap();
                        let expect = scene.terrain.height_at(p.x, p.y);
                        // Wall cells aside, the point must sit on the surface.
                        if scene.terrain.label_at(p) != SurfaceLabel::Wall {
                            assert_abs_diff_eq!(p.z, expect, epsilon = 1e-6);
                            checked += 1;
                        }
                    }
                }
                assert!(checked > 200, "{}: only {checked} cells valid", scene.spec.name);
            }
        }
    }

    #[test]
    fn bbox_region_carries_the_corrupted_target_depth() {
        let mut spec = zero_noise(desert_scene(5));
        spec.decoys.clear();
        spec.depth.bbox_corruption_m = 2.0;
        let scene = Scene::new(spec);
        let frame = 100;
        let map = scene.relative_depth_map(frame);
        let pose = scene.true_pose(frame);
        let bbox = scene.gt_bbox(frame).unwrap();
        let [theta0, theta1] = scene.spec.depth.theta;
        let true_depth = pose.to_camera(scene.target_center(frame)).z;
        let ds = scene.spec.depth.downsample as f64;
        let center_cell = bbox.center / ds;
        let rel = map.get(center_cell.y as usize, center_cell.x as usize);
        assert!(rel.is_finite());
        let depth = 1.0 / (theta0 + theta1 * rel as f64);
        let err = (depth - true_depth).abs();
        assert!(
            (1.0..=3.0).contains(&err),
            "corruption should land in [0.5, 1.5] x 2 m, got {err}"
        );
    }

    #[test]
    fn observations_are_deterministic_and_labeled() {
        let scene = Scene::new(city_scene(11));
        let a = scene.observations(42);
        let b = scene.observations(42);
        assert_eq!(a, b);
        assert!(a.len() > 50, "expected a populated view, got {}", a.len());
        assert!(a.windows(2).all(|w| w[0].id < w[1].id), "sorted by id");
        let labels: Vec<SurfaceLabel> = a.iter().map(|o| o.label).collect();
        assert!(labels.contains(&SurfaceLabel::Ground) && labels.contains(&SurfaceLabel::Roof));
    }

    #[test]
    fn street_features_behind_the_roof_edge_are_occluded() {
        let mut spec = zero_noise(city_scene(2));
        spec.features.pixel_sigma = 0.0;
        let scene = Scene::new(spec);
        let frame = 200;
        let pose = scene.true_pose(frame);
        let origin = pose.translation();
        let obs: HashMap<u64, Vec2> =
            scene.observations(frame).into_iter().map(|o| (o.id, o.pixel)).collect();
        let mut shadowed = 0;
        for &(id, p) in &scene.features {
            if obs.contains_key(&id) {
                continue;
            }
            // Visible direction but absent: must be terrain-shadowed or
            // out of frame.
            if let Ok(px) = project(p, &pose, &scene.intr) {
                if scene.intr.contains(px) {
                    let to = p - origin;
                    let ray = Ray { origin, direction: Unit::new_normalize(to) };
                    let (hit, range) = scene.terrain.raycast(&ray).unwrap();
                    assert!(range < to.norm() - 1e-3, "feature {id} misses its occluder");
                    assert!(hit.z > p.z, "occluder must be above the street point");
                    shadowed += 1;
                }
            }
        }
        assert!(shadowed > 0, "the roof edge must shadow some street features");
    }

    #[test]
    fn response_peaks_at_the_target_and_decoys_stay_within_their_band() {
        let spec = zero_noise(make_decoy_scene(9));
        let scene = Scene::new(spec);
        // Find a frame where target and nearest decoy are well separated.
        let frame = 30;
        let target_px = scene.target_pixel(frame).unwrap();
        let window = ScoreWindow::centered(target_px, (61, 61), 4.0).clamped_to(&scene.intr);
        let map = scene.render_response(frame, &window);
        // The maximum cell lies on the target bump (within a cell).
        let (mut best, mut best_v) = ((0usize, 0usize), f32::NEG_INFINITY);
        for r in 0..61 {
            for c in 0..61 {
                if map.scores.get(r, c) > best_v {
                    best_v = map.scores.get(r, c);
                    best = (r, c);
                }
            }
        }
        let peak_px = window.pixel_of(best.0, best.1);
        assert!((peak_px - target_px).norm() <= map.window.stride * 1.5);

        // Decoy amplitude draws respect the configured band.
        for f in 0..scene.frames() {
            let pose = scene.true_pose(f);
            for d in scene.decoy_centers(f) {
                let Ok(px) = project(d, &pose, &scene.intr) else { continue };
                if !scene.intr.contains(px) {
                    continue;
                }
                let w = ScoreWindow::centered(px, (5, 5), 1.0);
                let m = scene.render_response(f, &w);
                let v = m.scores.get(2, 2) as f64;
                // The decoy bump alone is within [0.9, 1.05]; the target
                // bump can add on top, never subtract.
                assert!(v > 0.85, "frame {f}: decoy bump {v} too weak");
            }
        }
    }

    #[test]
    fn occlusion_collapses_the_response() {
        let spec = zero_noise(desert_scene(4));
        let scene = Scene::new(spec);
        let frame = 42; // inside the [40, 48) occlusion window
        assert!(scene.is_occluded(frame));
        let px = scene.target_pixel(frame).unwrap();
        let window = ScoreWindow::centered(px, (61, 61), 4.0).clamped_to(&scene.intr);
        let map = scene.render_response(frame, &window);
        let max = map.max_raw().unwrap();
        assert!(max < 0.05, "occluded max {max}");
        assert!(!scene.is_occluded(60));
    }

    #[test]
    fn decoys_cross_the_target_within_image_range() {
        let scene = Scene::new(make_decoy_scene(13));
        let mut best = f64::INFINITY;
        for frame in 0..scene.frames() {
            let target = scene.target_pixel(frame).unwrap();
            let pose = scene.true_pose(frame);
            for d in scene.decoy_centers(frame) {
                if let Ok(px) = project(d, &pose, &scene.intr) {
                    best = best.min((px - target).norm());
                }
            }
        }
        let bbox_w = scene.gt_bbox(200).unwrap().min_side();
        assert!(best < 1.5 * bbox_w, "closest approach {best}px vs bbox {bbox_w}px");
    }

    #[test]
    fn frame_bundles_are_reproducible() {
        let scene = Scene::new(desert_scene(21));
        let a = scene.render_frame(123);
        let b = scene.render_frame(123);
        assert_eq!(a.rel_depth.data(), b.rel_depth.data());
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.noisy_pose.translation(), b.noisy_pose.translation());
        assert_eq!(
            a.score_map.as_ref().unwrap().scores.data(),
            b.score_map.as_ref().unwrap().scores.data()
        );
    }

    #[test]
    fn specs_roundtrip_through_json() {
        for spec in make_ablation_suite(17) {
            let s = serde_json::to_string_pretty(&spec).unwrap();
            let back: SceneSpec = serde_json::from_str(&s).unwrap();
            assert_eq!(spec, back);
        }
    }
}
