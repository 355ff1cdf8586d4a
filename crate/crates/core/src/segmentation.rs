//! Tile-based ground extraction around the target by seeded region growing.
//!
//! The metric depth map is cropped to the neighbourhood of the active ROI
//! tracks, backprojected into a gravity-aligned organized cloud and cut into
//! an n x n tile grid. Tiles overlapping the target box are excluded from
//! fitting; the one-tile dilation ring around them seeds the growth. A seed
//! must lie at or below the target's estimated height (this is what keeps
//! roofs out when the drone flies along a building edge) and growth spreads
//! only between tiles that agree in normal, centroid offset and planarity.
//! Finally, pixels of the border tiles are re-tested against the plane of
//! the grown region so the mask hugs actual terrain discontinuities.

use thiserror::Error;

use crate::geometry::{backproject, Intrinsics, Plane, Pose, Vec2, Vec3};
use crate::grid::Grid;
use crate::planes::{fit_plane_tls, PlaneFitError};
use crate::roi::BoundingBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("no valid depth inside the bounding box")]
    EmptyBox,
    #[error("no admissible seed tile")]
    NoSeed,
    #[error("ground segmentation failed: {0}")]
    Failed(&'static str),
}

/// Gravity-aligned organized point cloud over a crop of the depth map.
/// Cell (r, c) corresponds to depth-map cell (origin.0 + r, origin.1 + c);
/// heights are the world z coordinates.
#[derive(Debug, Clone)]
pub struct OrganizedCloud {
    width: usize,
    height: usize,
    /// (row, col) of the crop within the source depth map.
    pub origin: (usize, usize),
    points: Vec<Vec3>,
    valid: Vec<bool>,
}

impl OrganizedCloud {
    pub fn new(width: usize, height: usize, origin: (usize, usize)) -> Self {
        Self {
            width,
            height,
            origin,
            points: vec![Vec3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&mut self, row: usize, col: usize, p: Vec3) {
        self.points[row * self.width + col] = p;
        self.valid[row * self.width + col] = true;
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Vec3> {
        self.valid[row * self.width + col].then(|| self.points[row * self.width + col])
    }

    /// Backprojects the valid cells of a metric inverse-depth map crop.
    pub fn from_depth_crop(
        map: &Grid<f64>,
        intr: &Intrinsics,
        pose: &Pose,
        crop: CellRect,
    ) -> Self {
        let mut cloud = Self::new(crop.cols(), crop.rows(), (crop.r0, crop.c0));
        for r in 0..crop.rows() {
            for c in 0..crop.cols() {
                let (mr, mc) = (crop.r0 + r, crop.c0 + c);
                let rho = map.get(mr, mc);
                if !rho.is_finite() || rho <= 0.0 {
                    continue;
                }
                let px = Vec2::new(mc as f64 + 0.5, mr as f64 + 0.5);
                if let Ok(p) = backproject(px, rho, pose, intr) {
                    cloud.set(r, c, p);
                }
            }
        }
        cloud
    }
}

/// Half-open cell rectangle `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CellRect {
    pub fn rows(&self) -> usize {
        self.r1.saturating_sub(self.r0)
    }

    pub fn cols(&self) -> usize {
        self.c1.saturating_sub(self.c0)
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0 || self.cols() == 0
    }

    fn intersects(&self, other: &CellRect) -> bool {
        self.r0 < other.r1 && other.r0 < self.r1 && self.c0 < other.c1 && other.c0 < self.c1
    }

    fn contains_rect(&self, other: &CellRect) -> bool {
        self.r0 <= other.r0 && self.r1 >= other.r1 && self.c0 <= other.c0 && self.c1 >= other.c1
    }
}

/// Role of a tile relative to the target box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileLabel {
    /// Fully inside the target box: never fitted, never grown.
    Excluded,
    /// Crosses the box boundary: not grown, but dilated into the seed ring.
    Crossing,
    /// One-tile dilation of the crossing tiles: seeds come from here.
    Seeding,
    /// Plain terrain tile, reachable by growth.
    Free,
}

/// Plane fit of one tile.
#[derive(Debug, Clone)]
pub struct TileFit {
    pub plane: Plane,
    pub centroid: Vec3,
    pub mse: f64,
    pub mean_z: f64,
    pub count: usize,
}

/// n x n tile decomposition of the crop with per-tile fits and labels.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub n: usize,
    crop_w: usize,
    crop_h: usize,
    fits: Vec<Option<TileFit>>,
    labels: Vec<TileLabel>,
}

impl TileGrid {
    pub fn fit(&self, tile: usize) -> Option<&TileFit> {
        self.fits[tile].as_ref()
    }

    pub fn label(&self, tile: usize) -> TileLabel {
        self.labels[tile]
    }

    pub fn tile_count(&self) -> usize {
        self.n * self.n
    }

    /// Cell rectangle of a tile within the crop.
    pub fn tile_rect(&self, tile: usize) -> CellRect {
        let (ti, tj) = (tile / self.n, tile % self.n);
        CellRect {
            r0: ti * self.crop_h / self.n,
            r1: (ti + 1) * self.crop_h / self.n,
            c0: tj * self.crop_w / self.n,
            c1: (tj + 1) * self.crop_w / self.n,
        }
    }

    fn growable(&self, tile: usize) -> bool {
        matches!(self.labels[tile], TileLabel::Seeding | TileLabel::Free)
    }

    fn neighbours4(&self, tile: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.n as isize;
        let (ti, tj) = ((tile / self.n) as isize, (tile % self.n) as isize);
        [(ti - 1, tj), (ti + 1, tj), (ti, tj - 1), (ti, tj + 1)]
            .into_iter()
            .filter(move |&(i, j)| i >= 0 && i < n && j >= 0 && j < n)
            .map(move |(i, j)| (i * n + j) as usize)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationConfig {
    /// Tiles per side of the grid over the crop.
    pub tiles_per_side: usize,
    /// Maximum number of seeds the alternating seed/grow loop consumes.
    pub max_seeds: usize,
    /// Growth condition (i): normal agreement cone, degrees.
    pub max_normal_angle_deg: f64,
    /// Growth condition (ii): centroid-to-plane distance below
    /// `d * sin(alpha)` for centroid distance d.
    pub centroid_alpha_deg: f64,
    /// Growth condition (iii) and seed admission: tile MSE ceiling, m^2.
    pub tile_mse_max: f64,
    /// Border pixels pass when their squared plane distance is below
    /// `refine_gate_factor * grown-region MSE`.
    pub refine_gate_factor: f64,
    /// Floor on the refinement distance gate, m. Keeps exact synthetic
    /// planes (MSE == 0) from rejecting their own pixels.
    pub refine_min_distance: f64,
    pub min_tile_points: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            tiles_per_side: 20,
            max_seeds: 8,
            max_normal_angle_deg: 10.0,
            centroid_alpha_deg: 3.0,
            tile_mse_max: 0.001,
            refine_gate_factor: 9.0,
            refine_min_distance: 1e-6,
            min_tile_points: 3,
        }
    }
}

/// Ground mask over the crop, with the tile-level decisions kept around for
/// diagnostics.
#[derive(Debug, Clone)]
pub struct GroundMask {
    /// 1 = ground, over the crop.
    pub mask: Grid<u8>,
    /// Crop origin (row, col) within the depth map.
    pub origin: (usize, usize),
    pub grown: Vec<bool>,
    pub labels: Vec<TileLabel>,
    pub tiles_per_side: usize,
}

impl GroundMask {
    /// Tests a depth-map pixel coordinate against the mask.
    pub fn contains_map_px(&self, px: Vec2) -> bool {
        let (r, c) = (
            px.y.floor() as isize - self.origin.0 as isize,
            px.x.floor() as isize - self.origin.1 as isize,
        );
        if r < 0 || c < 0 || r as usize >= self.mask.height() || c as usize >= self.mask.width() {
            return false;
        }
        self.mask.get(r as usize, c as usize) == 1
    }

    pub fn ground_cell_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1).count()
    }

    /// Ground cells as depth-map (row, col) coordinates, row-major.
    pub fn ground_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (r0, c0) = self.origin;
        let w = self.mask.width();
        self.mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(move |(i, _)| (r0 + i / w, c0 + i % w))
    }
}

/// Level (world z) of the object inside the box: the median over the
/// cloud cells whose centers fall strictly inside the box. Boxes include
/// background around the object's silhouette, and the rasterized boundary
/// ring belongs to the ground; the strict test plus the median keep both
/// from dragging the level down. `bbox` is in the source map's pixel
/// coordinates, like the cloud's origin.
pub fn estimate_object_height(
    cloud: &OrganizedCloud,
    bbox: &BoundingBox,
) -> Result<f64, SegmentationError> {
    let mut zs = Vec::new();
    for r in 0..cloud.height {
        for c in 0..cloud.width {
            let px = Vec2::new(
                (cloud.origin.1 + c) as f64 + 0.5,
                (cloud.origin.0 + r) as f64 + 0.5,
            );
            if !bbox.contains(px) {
                continue;
            }
            if let Some(p) = cloud.get(r, c) {
                zs.push(p.z);
            }
        }
    }
    if zs.is_empty() {
        return Err(SegmentationError::EmptyBox);
    }
    zs.sort_by(f64::total_cmp);
    let mid = zs.len() / 2;
    Ok(if zs.len() % 2 == 1 { zs[mid] } else { 0.5 * (zs[mid - 1] + zs[mid]) })
}

/// Fits every tile and assigns labels relative to the box cell rectangle.
pub fn build_tile_grid(
    cloud: &OrganizedCloud,
    bbox_cells: &CellRect,
    cfg: &SegmentationConfig,
) -> TileGrid {
    let n = cfg.tiles_per_side;
    let mut grid = TileGrid {
        n,
        crop_w: cloud.width,
        crop_h: cloud.height,
        fits: vec![None; n * n],
        labels: vec![TileLabel::Free; n * n],
    };
    for tile in 0..n * n {
        let rect = grid.tile_rect(tile);
        if rect.is_empty() {
            continue;
        }
        if bbox_cells.contains_rect(&rect) {
            grid.labels[tile] = TileLabel::Excluded;
            continue;
        }
        if rect.intersects(bbox_cells) {
            grid.labels[tile] = TileLabel::Crossing;
            continue;
        }
        let mut pts = Vec::with_capacity(rect.rows() * rect.cols());
        for r in rect.r0..rect.r1 {
            for c in rect.c0..rect.c1 {
                if let Some(p) = cloud.get(r, c) {
                    pts.push(p);
                }
            }
        }
        if pts.len() < cfg.min_tile_points {
            continue;
        }
        match fit_plane_tls(&pts) {
            Ok((plane, mse)) => {
                let centroid =
                    pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
                let mean_z = pts.iter().map(|p| p.z).sum::<f64>() / pts.len() as f64;
                grid.fits[tile] =
                    Some(TileFit { plane, centroid, mse, mean_z, count: pts.len() });
            }
            Err(PlaneFitError::CollinearPoints | PlaneFitError::InsufficientPoints { .. }) => {}
            Err(_) => unreachable!(),
        }
    }
    // Seeding ring: one-tile (8-neighbour) outward dilation of the box
    // tiles. Going from both kinds covers boxes that happen to align with
    // tile boundaries and therefore have no crossing tiles at all.
    let nn = n as isize;
    for tile in 0..n * n {
        if !matches!(grid.labels[tile], TileLabel::Crossing | TileLabel::Excluded) {
            continue;
        }
        let (ti, tj) = ((tile / n) as isize, (tile % n) as isize);
        for di in -1..=1isize {
            for dj in -1..=1isize {
                let (i, j) = (ti + di, tj + dj);
                if i < 0 || i >= nn || j < 0 || j >= nn {
                    continue;
                }
                let t = (i * nn + j) as usize;
                if grid.labels[t] == TileLabel::Free {
                    grid.labels[t] = TileLabel::Seeding;
                }
            }
        }
    }
    grid
}

/// Lowest-MSE seeding tile at or below the object height, skipping
/// `exclude`d tiles. Tiles above `tile_mse_max` are never seeds.
pub fn select_seed(
    grid: &TileGrid,
    object_height: f64,
    exclude: &[bool],
    cfg: &SegmentationConfig,
) -> Result<usize, SegmentationError> {
    (0..grid.tile_count())
        .filter(|&t| grid.label(t) == TileLabel::Seeding && !exclude[t])
        .filter_map(|t| grid.fit(t).map(|f| (t, f)))
        .filter(|(_, f)| f.mean_z <= object_height && f.mse < cfg.tile_mse_max)
        .min_by(|a, b| a.1.mse.total_cmp(&b.1.mse).then(a.0.cmp(&b.0)))
        .map(|(t, _)| t)
        .ok_or(SegmentationError::NoSeed)
}

/// 4-neighbour BFS from `seed`, marking admitted tiles in `region`.
/// A candidate joins when, relative to the region tile it is reached from:
/// (i) the normals agree within the cone, (ii) its centroid lies near the
/// parent plane, (iii) its own fit is planar enough. Failed candidates stay
/// eligible via other parents, so the result is the closure of the
/// admission relation and does not depend on traversal order.
fn grow_from_seed(grid: &TileGrid, seed: usize, region: &mut [bool], cfg: &SegmentationConfig) {
    let dot_min = cfg.max_normal_angle_deg.to_radians().cos();
    let sin_alpha = cfg.centroid_alpha_deg.to_radians().sin();
    let mut queue = std::collections::VecDeque::new();
    if !region[seed] {
        region[seed] = true;
    }
    queue.push_back(seed);
    while let Some(s) = queue.pop_front() {
        let fs = grid.fit(s).expect("region tiles always have fits");
        for c in grid.neighbours4(s) {
            if region[c] || !grid.growable(c) {
                continue;
            }
            let Some(fc) = grid.fit(c) else {
                continue;
            };
            if fc.mse >= cfg.tile_mse_max {
                continue;
            }
            if fc.plane.normal().dot(&fs.plane.normal()).abs() <= dot_min {
                continue;
            }
            let d = (fc.centroid - fs.centroid).norm();
            if fs.plane.distance(fc.centroid) >= d * sin_alpha {
                continue;
            }
            region[c] = true;
            queue.push_back(c);
        }
    }
}

/// Alternates seed selection and growth until `max_seeds` seeds were used
/// or no admissible seed remains. Errors only when the very first seed is
/// missing (no ground evidence at all).
pub fn region_grow(
    grid: &TileGrid,
    object_height: f64,
    cfg: &SegmentationConfig,
) -> Result<(Vec<bool>, Vec<usize>), SegmentationError> {
    let mut region = vec![false; grid.tile_count()];
    let mut seeds = Vec::new();
    for _ in 0..cfg.max_seeds {
        match select_seed(grid, object_height, &region, cfg) {
            Ok(seed) => {
                seeds.push(seed);
                grow_from_seed(grid, seed, &mut region, cfg);
            }
            Err(_) if !seeds.is_empty() => break,
            Err(e) => return Err(e),
        }
    }
    Ok((region, seeds))
}

/// Pixel-level mask from the grown tiles. Interior tiles contribute all
/// their valid cells; cells of border tiles (those with a non-grown or
/// out-of-crop 4-neighbour) must additionally lie within the distance gate
/// of the single plane fit to the whole grown region.
pub fn refine_boundary(
    cloud: &OrganizedCloud,
    grid: &TileGrid,
    region: &[bool],
    cfg: &SegmentationConfig,
) -> Grid<u8> {
    let mut mask = Grid::filled(cloud.width, cloud.height, 0u8);
    let mut all_pts = Vec::new();
    for tile in 0..grid.tile_count() {
        if !region[tile] {
            continue;
        }
        let rect = grid.tile_rect(tile);
        for r in rect.r0..rect.r1 {
            for c in rect.c0..rect.c1 {
                if let Some(p) = cloud.get(r, c) {
                    all_pts.push(p);
                }
            }
        }
    }
    let fit = fit_plane_tls(&all_pts);
    for tile in 0..grid.tile_count() {
        if !region[tile] {
            continue;
        }
        let is_border = {
            let (ti, tj) = (tile / grid.n, tile % grid.n);
            let at_edge = ti == 0 || tj == 0 || ti == grid.n - 1 || tj == grid.n - 1;
            at_edge || grid.neighbours4(tile).any(|t| !region[t])
        };
        let rect = grid.tile_rect(tile);
        for r in rect.r0..rect.r1 {
            for c in rect.c0..rect.c1 {
                let Some(p) = cloud.get(r, c) else {
                    continue;
                };
                let admit = if !is_border {
                    true
                } else {
                    match &fit {
                        Ok((plane, mse)) => {
                            let gate = (cfg.refine_gate_factor * mse)
                                .max(cfg.refine_min_distance * cfg.refine_min_distance);
                            plane.distance(p).powi(2) < gate
                        }
                        // Degenerate region fit: keep the tile decision.
                        Err(_) => true,
                    }
                };
                if admit {
                    mask.set(r, c, 1);
                }
            }
        }
    }
    mask
}

/// Output of the full segmentation pass.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub mask: GroundMask,
    /// Track ids whose current pixel falls inside the ground mask.
    pub selected_ids: Vec<u64>,
    /// Median world z of the depth inside the box (coarse object level).
    pub object_level: f64,
}

/// Runs the full pass on a metric inverse-depth map. `bbox` and `tracks`
/// are given in the coordinates of `map` (which may be a downsampled
/// camera); `tracks` carries (id, current pixel) of the active ROI tracks
/// and determines the crop extent.
pub fn segment_ground(
    map: &Grid<f64>,
    intr: &Intrinsics,
    pose: &Pose,
    bbox: &BoundingBox,
    tracks: &[(u64, Vec2)],
    cfg: &SegmentationConfig,
) -> Result<SegmentationOutput, SegmentationError> {
    // Crop: bounding rectangle of the active tracks and the box, padded by
    // one tile.
    let (mut min_x, mut min_y) = (bbox.min().x, bbox.min().y);
    let (mut max_x, mut max_y) = (bbox.max().x, bbox.max().y);
    for &(_, px) in tracks {
        min_x = min_x.min(px.x);
        min_y = min_y.min(px.y);
        max_x = max_x.max(px.x);
        max_y = max_y.max(px.y);
    }
    let pad_x = ((max_x - min_x) / cfg.tiles_per_side as f64).ceil();
    let pad_y = ((max_y - min_y) / cfg.tiles_per_side as f64).ceil();
    let crop = CellRect {
        r0: (min_y - pad_y).floor().max(0.0) as usize,
        r1: ((max_y + pad_y).ceil() as usize).min(map.height()),
        c0: (min_x - pad_x).floor().max(0.0) as usize,
        c1: ((max_x + pad_x).ceil() as usize).min(map.width()),
    };
    if crop.rows() < cfg.tiles_per_side || crop.cols() < cfg.tiles_per_side {
        return Err(SegmentationError::Failed("crop smaller than the tile grid"));
    }

    let cloud = OrganizedCloud::from_depth_crop(map, intr, pose, crop);
    let bbox_cells = CellRect {
        r0: (bbox.min().y.floor().max(0.0) as usize).saturating_sub(crop.r0),
        r1: ((bbox.max().y.ceil().max(0.0) as usize).saturating_sub(crop.r0)).min(crop.rows()),
        c0: (bbox.min().x.floor().max(0.0) as usize).saturating_sub(crop.c0),
        c1: ((bbox.max().x.ceil().max(0.0) as usize).saturating_sub(crop.c0)).min(crop.cols()),
    };
    let object_level = match estimate_object_height(&cloud, bbox) {
        Ok(h) => h,
        Err(_) => return Err(SegmentationError::Failed("no valid depth inside the box")),
    };

    let grid = build_tile_grid(&cloud, &bbox_cells, cfg);
    let (region, _seeds) = match region_grow(&grid, object_level, cfg) {
        Ok(r) => r,
        Err(_) => return Err(SegmentationError::Failed("no admissible seed")),
    };
    let mask = refine_boundary(&cloud, &grid, &region, cfg);
    if mask.data().iter().all(|&v| v == 0) {
        return Err(SegmentationError::Failed("empty growth"));
    }

    let ground = GroundMask {
        mask,
        origin: cloud.origin,
        grown: region,
        labels: (0..grid.tile_count()).map(|t| grid.label(t)).collect(),
        tiles_per_side: cfg.tiles_per_side,
    };
    let selected_ids = tracks
        .iter()
        .filter(|(_, px)| ground.contains_map_px(*px))
        .map(|&(id, _)| id)
        .collect();
    Ok(SegmentationOutput { mask: ground, selected_ids, object_level })
}
