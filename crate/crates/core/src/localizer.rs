//! Target fixes from the ground plane and the pixel ray.
//!
//! The target pixel defines a ray; by itself it pins down direction only.
//! The missing range comes from the ground model: intersect the ray with
//! the plane the target moves on. Since the detector aims at the target's
//! *center* — half the object height above ground — the plane is lifted by
//! half that height along its normal before intersecting, which removes
//! the grazing-angle overshoot bias of intersecting the bare ground.

use thiserror::Error;

use crate::geometry::{raycast_plane, GeometryError, Plane, Ray, Vec3};
use crate::planes::{raycast_uncertainty, FusedPlaneModel, PlaneHypothesis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("no ground plane model available")]
    NoPlane,
    #[error("target ray misses the ground plane: {0}")]
    Raycast(#[from] GeometryError),
}

/// Which plane model produced a fix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixSource {
    /// The ground fit of the current frame.
    FreshFit,
    /// The temporally fused model (fresh fit missing or fusion preferred).
    FusedFallback,
}

/// One localization result.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFix {
    /// Estimated target center, world frame.
    pub position: Vec3,
    /// Distance from the camera to the fix along the ray.
    pub range: f64,
    /// Spread of the range across the current plane hypotheses; feeds the
    /// measurement noise of the trajectory filter.
    pub depth_sigma: f64,
    pub source: FixSource,
}

#[derive(Debug, Clone)]
pub struct LocalizerConfig {
    /// Lift the plane by half the object height before intersecting.
    pub lift_on: bool,
    /// Use the fused model even when a fresh fit exists.
    pub prefer_fused: bool,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { lift_on: true, prefer_fused: true }
    }
}

/// Plane shifted along its normal by half the object height, so that ray
/// intersections land at the object's center instead of its footprint.
pub fn lift_plane(plane: &Plane, object_height: f64) -> Plane {
    plane.translated_along_normal(0.5 * object_height)
}

/// Intersects the target ray with the preferred plane model.
///
/// `fresh` is the ground fit of the current frame when segmentation and
/// fitting succeeded. `object_height` is the target's height over the
/// ground (non-positive values disable the lift for this call).
pub fn localize(
    ray: &Ray,
    fresh: Option<&Plane>,
    fused: &FusedPlaneModel,
    hypotheses: &[PlaneHypothesis],
    object_height: f64,
    cfg: &LocalizerConfig,
) -> Result<TargetFix, LocalizeError> {
    let (plane, source) = if cfg.prefer_fused && fused.valid {
        (fused.plane, FixSource::FusedFallback)
    } else if let Some(p) = fresh {
        (*p, FixSource::FreshFit)
    } else if fused.valid {
        (fused.plane, FixSource::FusedFallback)
    } else {
        return Err(LocalizeError::NoPlane);
    };

    let plane = if cfg.lift_on && object_height > 0.0 {
        lift_plane(&plane, object_height)
    } else {
        plane
    };
    let (position, range) = raycast_plane(ray, &plane)?;
    let depth_sigma = raycast_uncertainty(hypotheses, ray).map(|(_, s)| s).unwrap_or(0.0);
    Ok(TargetFix { position, range, depth_sigma, source })
}
