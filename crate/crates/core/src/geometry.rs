//! Camera geometry: poses, pinhole projection, rays, planes and two-view
//! inverse depth.
//!
//! Conventions used across the crate:
//!
//! * frames are right-handed; the world +z axis opposes gravity,
//! * the camera looks along its own +z axis,
//! * a [`Pose`] maps camera coordinates to world coordinates,
//! * depth is the camera-frame z coordinate of a point; inverse depth is its
//!   reciprocal in 1/m,
//! * pixel coordinates are continuous, with integer grid cell (row, col)
//!   centered at (col + 0.5, row + 0.5).

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// World +z, the axis opposing gravity.
pub const WORLD_UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

/// Orthonormality tolerance accepted by [`Pose::from_matrix`].
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0:.6})")]
    PointBehindCamera(f64),
    #[error("inverse depth must be positive and finite, got {0}")]
    NonPositiveInverseDepth(f64),
    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotARotation(f64),
    #[error("perpendicular baseline {got:.3e} m is below the minimum {min:.3e} m")]
    DegenerateBaseline { got: f64, min: f64 },
    #[error("ray is parallel to the plane")]
    RayParallel,
    #[error("plane intersection is behind the ray origin (range {0:.6})")]
    NegativeRange(f64),
}

/// Pinhole intrinsics for an image of `width` x `height` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Panics if the focal lengths are not positive or the principal point
    /// lies outside the image.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(
            cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64,
            "principal point must lie inside the image"
        );
        Self { fx, fy, cx, cy, width, height }
    }

    /// Square-pixel camera from a horizontal field of view in degrees.
    pub fn from_horizontal_fov(fov_deg: f64, width: u32, height: u32) -> Self {
        assert!(fov_deg > 0.0 && fov_deg < 180.0);
        let f = width as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn contains(&self, px: Vec2) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }

    /// Intrinsics of the same camera downsampled by an integer factor.
    /// Cell centers of the coarse grid stay aligned with the fine grid.
    pub fn downsampled(&self, factor: u32) -> Self {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        let s = 1.0 / factor as f64;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Rigid transform mapping camera coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vec3::zeros())
    }

    /// Validates that `r` is orthonormal with positive determinant to
    /// [`ROTATION_TOL`] before accepting it.
    pub fn from_matrix(r: Mat3, t: Vec3) -> Result<Self, GeometryError> {
        let residual = (r.transpose() * r - Mat3::identity()).abs().max();
        let det_residual = (r.determinant() - 1.0).abs();
        let worst = residual.max(det_residual);
        if worst > ROTATION_TOL {
            return Err(GeometryError::NotARotation(worst));
        }
        Ok(Self::new(Rotation3::from_matrix_unchecked(r), t))
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    /// Camera center in world coordinates.
    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn to_world(&self, p_cam: Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: Vec3) -> Vec3 {
        self.rotation.inverse() * (p_world - self.translation)
    }

    /// `self * rhs`: applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose::new(self.rotation * rhs.rotation, self.rotation * rhs.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rot = self.rotation.inverse();
        Pose::new(rot, -(rot * self.translation))
    }
}

/// Half-line from `origin` along the unit `direction`.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Unit<Vec3>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction: Unit::new_normalize(direction) }
    }

    pub fn at(&self, range: f64) -> Vec3 {
        self.origin + self.direction.into_inner() * range
    }
}

/// Plane `{ x : normal . x + offset = 0 }` with unit normal.
///
/// The stored orientation is canonical: `normal . WORLD_UP >= 0`, with the
/// first nonzero component of (z, x, y) positive when the normal is exactly
/// horizontal. Two fits of the same surface therefore compare equal up to
/// noise regardless of the side they were estimated from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Unit<Vec3>,
    offset: f64,
}

impl Plane {
    /// Builds the plane `normal . x + offset = 0`, normalizing and
    /// canonicalizing the orientation. `normal` must be nonzero.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let norm = normal.norm();
        assert!(norm > 0.0 && norm.is_finite(), "plane normal must be nonzero");
        let mut n = normal / norm;
        let mut d = offset / norm;
        let flip = if n.z != 0.0 {
            n.z < 0.0
        } else if n.x != 0.0 {
            n.x < 0.0
        } else {
            n.y < 0.0
        };
        if flip {
            n = -n;
            d = -d;
        }
        Self { normal: Unit::new_unchecked(n), offset: d }
    }

    pub fn from_point_normal(point: Vec3, normal: Vec3) -> Self {
        let n = normal.normalize();
        Self::new(n, -n.dot(&point))
    }

    pub fn normal(&self) -> Vec3 {
        self.normal.into_inner()
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal().dot(&p) + self.offset
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.signed_distance(p).abs()
    }

    /// Plane shifted by `delta` meters along its (canonical) normal.
    pub fn translated_along_normal(&self, delta: f64) -> Plane {
        Plane { normal: self.normal, offset: self.offset - delta }
    }
}

/// Projects a world point into the image. The point must be strictly in
/// front of the camera; the returned pixel may fall outside the image
/// bounds, which is for the caller to check.
pub fn project(point_world: Vec3, pose: &Pose, intr: &Intrinsics) -> Result<Vec2, GeometryError> {
    let pc = pose.to_camera(point_world);
    if pc.z <= 0.0 {
        return Err(GeometryError::PointBehindCamera(pc.z));
    }
    Ok(Vec2::new(intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy))
}

/// Backprojects a pixel at the given inverse depth (1 / camera-frame z) to a
/// world point.
pub fn backproject(
    pixel: Vec2,
    inv_depth: f64,
    pose: &Pose,
    intr: &Intrinsics,
) -> Result<Vec3, GeometryError> {
    if !(inv_depth > 0.0) || !inv_depth.is_finite() {
        return Err(GeometryError::NonPositiveInverseDepth(inv_depth));
    }
    let z = 1.0 / inv_depth;
    let pc = Vec3::new((pixel.x - intr.cx) / intr.fx * z, (pixel.y - intr.cy) / intr.fy * z, z);
    Ok(pose.to_world(pc))
}

/// World-frame viewing ray through a pixel.
pub fn ray_through_pixel(pixel: Vec2, pose: &Pose, intr: &Intrinsics) -> Ray {
    let dir_cam = Vec3::new((pixel.x - intr.cx) / intr.fx, (pixel.y - intr.cy) / intr.fy, 1.0);
    Ray::new(pose.translation(), pose.rotation() * dir_cam)
}

/// Two-view triangulation settings.
#[derive(Debug, Clone, Copy)]
pub struct TriangulationConfig {
    /// Minimum length, in meters, of the baseline component perpendicular to
    /// the anchor viewing ray. Shorter baselines (hover) are rejected.
    pub min_perp_baseline: f64,
    /// Isotropic pixel noise assumed when propagating measurement variance.
    pub pixel_sigma: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { min_perp_baseline: 1e-3, pixel_sigma: 1.0 }
    }
}

/// Linear two-view triangulation of the inverse depth of the point observed
/// at `pix0` in the anchor view `pose0` and at `pix1` in `pose1`.
///
/// Returns the inverse depth (anchored at `pose0`) together with its
/// variance, obtained by pushing `pixel_sigma` through the Jacobian of the
/// linear solution with respect to the current observation.
pub fn triangulate_inverse_depth(
    pix0: Vec2,
    pose0: &Pose,
    pix1: Vec2,
    pose1: &Pose,
    intr: &Intrinsics,
    cfg: &TriangulationConfig,
) -> Result<(f64, f64), GeometryError> {
    let f0 = Vec3::new((pix0.x - intr.cx) / intr.fx, (pix0.y - intr.cy) / intr.fy, 1.0);

    let baseline = pose1.translation() - pose0.translation();
    let dir0 = (pose0.rotation() * f0).normalize();
    let perp = (baseline - dir0 * baseline.dot(&dir0)).norm();
    if perp < cfg.min_perp_baseline {
        return Err(GeometryError::DegenerateBaseline { got: perp, min: cfg.min_perp_baseline });
    }

    // Anchor point at inverse depth rho seen from the current view:
    //   p_cam1 ~ a + b * rho,  a = R1^T R0 f0,  b = R1^T (t0 - t1).
    // Equating with the measured normalized coordinates m1 gives two linear
    // equations  A * rho = B  solved in least squares.
    let r1_inv = pose1.rotation().inverse();
    let a = r1_inv * (pose0.rotation() * f0);
    let b = r1_inv * (pose0.translation() - pose1.translation());
    let m1 = Vec2::new((pix1.x - intr.cx) / intr.fx, (pix1.y - intr.cy) / intr.fy);

    let av = Vec2::new(m1.x * b.z - b.x, m1.y * b.z - b.y);
    let bv = Vec2::new(a.x - m1.x * a.z, a.y - m1.y * a.z);
    let d = av.dot(&av);
    if d <= 0.0 {
        return Err(GeometryError::DegenerateBaseline { got: 0.0, min: cfg.min_perp_baseline });
    }
    let n = av.dot(&bv);
    let rho = n / d;

    // d rho / d m1 via the quotient rule; only A and B depend on m1.
    let dn_dmx = b.z * bv.x - av.x * a.z;
    let dd_dmx = 2.0 * av.x * b.z;
    let drho_dmx = (dn_dmx * d - n * dd_dmx) / (d * d);
    let dn_dmy = b.z * bv.y - av.y * a.z;
    let dd_dmy = 2.0 * av.y * b.z;
    let drho_dmy = (dn_dmy * d - n * dd_dmy) / (d * d);

    let j_u = drho_dmx / intr.fx;
    let j_v = drho_dmy / intr.fy;
    let var = (cfg.pixel_sigma * cfg.pixel_sigma * (j_u * j_u + j_v * j_v)).max(1e-18);
    Ok((rho, var))
}

/// Rotation that maps `world_up` onto +z. Returns the exact identity when
/// `world_up` already is +z.
pub fn gravity_rotation(world_up: Vec3) -> Rotation3<f64> {
    let up = world_up.normalize();
    if up == WORLD_UP {
        return Rotation3::identity();
    }
    match Rotation3::rotation_between(&up, &WORLD_UP) {
        Some(r) => r,
        // Antiparallel input: any half-turn about a horizontal axis works.
        None => Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI),
    }
}

/// Rotates `points` so the given up direction becomes +z (heights end up in
/// the z coordinate).
pub fn gravity_align(points: &[Vec3], world_up: Vec3) -> Vec<Vec3> {
    let r = gravity_rotation(world_up);
    points.iter().map(|p| r * p).collect()
}

/// Intersects a ray with a plane. Returns the intersection point and its
/// range along the ray; the range is always positive.
pub fn raycast_plane(ray: &Ray, plane: &Plane) -> Result<(Vec3, f64), GeometryError> {
    let denom = plane.normal().dot(&ray.direction);
    if denom.abs() < 1e-12 {
        return Err(GeometryError::RayParallel);
    }
    let range = -plane.signed_distance(ray.origin) / denom;
    if range <= 0.0 {
        return Err(GeometryError::NegativeRange(range));
    }
    Ok((ray.at(range), range))
}
