//! Analytic terrain models used by the synthetic scenes.

use serde::{Deserialize, Serialize};

use crate::geometry::{raycast_plane, Plane, Ray, Vec3, WORLD_UP};

/// What kind of surface a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceLabel {
    Ground,
    Roof,
    Wall,
}

/// Piecewise-planar terrain. `Step` models a building block: ground for
/// x below the edge, a roof above it, joined by a vertical wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Terrain {
    Planar { height: f64 },
    Step { ground_height: f64, roof_height: f64, edge_x: f64 },
    Slope { base_height: f64, grade: f64 },
}

impl Terrain {
    /// Height of the walkable surface under (x, y).
    pub fn height_at(&self, x: f64, _y: f64) -> f64 {
        match *self {
            Terrain::Planar { height } => height,
            Terrain::Step { ground_height, roof_height, edge_x } => {
                if x >= edge_x {
                    roof_height
                } else {
                    ground_height
                }
            }
            Terrain::Slope { base_height, grade } => base_height + grade * x,
        }
    }

    /// The plane the surface under (x, y) belongs to.
    pub fn plane_at(&self, x: f64, y: f64) -> Plane {
        match *self {
            Terrain::Planar { .. } | Terrain::Step { .. } => {
                Plane::new(WORLD_UP, -self.height_at(x, y))
            }
            Terrain::Slope { base_height, grade } => {
                Plane::new(Vec3::new(-grade, 0.0, 1.0), -base_height)
            }
        }
    }

    pub fn label_at(&self, p: Vec3) -> SurfaceLabel {
        match *self {
            Terrain::Planar { .. } | Terrain::Slope { .. } => SurfaceLabel::Ground,
            Terrain::Step { ground_height, roof_height, edge_x } => {
                if (p.x - edge_x).abs() < 1e-6
                    && p.z > ground_height + 1e-6
                    && p.z < roof_height - 1e-6
                {
                    SurfaceLabel::Wall
                } else if p.x >= edge_x {
                    SurfaceLabel::Roof
                } else {
                    SurfaceLabel::Ground
                }
            }
        }
    }

    /// Nearest visible surface point along the ray, with its range.
    pub fn raycast(&self, ray: &Ray) -> Option<(Vec3, f64)> {
        match *self {
            Terrain::Planar { height } => {
                raycast_plane(ray, &Plane::new(WORLD_UP, -height)).ok()
            }
            Terrain::Slope { base_height, grade } => {
                raycast_plane(ray, &Plane::new(Vec3::new(-grade, 0.0, 1.0), -base_height)).ok()
            }
            Terrain::Step { ground_height, roof_height, edge_x } => {
                let mut best: Option<(Vec3, f64)> = None;
                let mut consider = |hit: Option<(Vec3, f64)>, valid: &dyn Fn(Vec3) -> bool| {
                    if let Some((p, r)) = hit {
                        if valid(p) && best.map_or(true, |(_, br)| r < br) {
                            best = Some((p, r));
                        }
                    }
                };
                let ground = raycast_plane(ray, &Plane::new(WORLD_UP, -ground_height)).ok();
                consider(ground, &|p: Vec3| p.x <= edge_x);
                let roof = raycast_plane(ray, &Plane::new(WORLD_UP, -roof_height)).ok();
                consider(roof, &|p: Vec3| p.x >= edge_x);
                let wall = raycast_plane(ray, &Plane::new(Vec3::x(), -edge_x)).ok();
                consider(wall, &|p: Vec3| p.z >= ground_height && p.z <= roof_height);
                best
            }
        }
    }
}
