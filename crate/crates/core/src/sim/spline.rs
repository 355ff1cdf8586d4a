//! Catmull-Rom paths with an arclength parameterization.
//!
//! Waypoint lists define smooth vehicle paths; motion along them is given
//! by distance traveled, so constant speed means stepping the arclength
//! linearly regardless of how unevenly the waypoints are spaced.

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("a path needs at least 4 control points, got {0}")]
    InsufficientControls(usize),
    #[error("arclength {got} outside [0, {len}]")]
    OutOfDomain { got: f64, len: f64 },
}

/// Uniform Catmull-Rom spline through the interior control points, with a
/// lookup table mapping arclength to the curve parameter.
#[derive(Debug, Clone)]
pub struct PathSpline {
    controls: Vec<Vec3>,
    /// (cumulative arclength, parameter) samples, strictly increasing.
    lut: Vec<(f64, f64)>,
    total_len: f64,
}

/// Samples per segment when building the arclength table.
const LUT_SAMPLES_PER_SEGMENT: usize = 64;

impl PathSpline {
    pub fn new(controls: Vec<Vec3>) -> Result<Self, SplineError> {
        if controls.len() < 4 {
            return Err(SplineError::InsufficientControls(controls.len()));
        }
        let segments = controls.len() - 3;
        let mut spline = Self { controls, lut: Vec::new(), total_len: 0.0 };
        let steps = segments * LUT_SAMPLES_PER_SEGMENT;
        let mut lut = Vec::with_capacity(steps + 1);
        let mut acc = 0.0;
        let mut prev = spline.position(0.0);
        lut.push((0.0, 0.0));
        for k in 1..=steps {
            let u = k as f64 / LUT_SAMPLES_PER_SEGMENT as f64;
            let p = spline.position(u);
            acc += (p - prev).norm();
            prev = p;
            lut.push((acc, u));
        }
        spline.total_len = acc;
        spline.lut = lut;
        Ok(spline)
    }

    /// Total path length, meters.
    pub fn length(&self) -> f64 {
        self.total_len
    }

    /// Curve point at parameter u in [0, segments], where each unit spans
    /// one interior control interval.
    pub fn position(&self, u: f64) -> Vec3 {
        let segments = self.controls.len() - 3;
        let (seg, t) = if u >= segments as f64 {
            (segments - 1, 1.0)
        } else {
            (u.floor() as usize, u.fract())
        };
        let [p0, p1, p2, p3] =
            [&self.controls[seg], &self.controls[seg + 1], &self.controls[seg + 2], &self.controls[seg + 3]];
        let t2 = t * t;
        let t3 = t2 * t;
        0.5 * ((2.0 * t2 - t3 - t) * p0
            + (3.0 * t3 - 5.0 * t2 + 2.0) * p1
            + (4.0 * t2 - 3.0 * t3 + t) * p2
            + (t3 - t2) * p3)
    }

    /// Unit-speed point lookup: the position after traveling `s` meters
    /// from the path start.
    pub fn at_arclength(&self, s: f64) -> Result<Vec3, SplineError> {
        if !(0.0..=self.total_len).contains(&s) {
            return Err(SplineError::OutOfDomain { got: s, len: self.total_len });
        }
        let i = self.lut.partition_point(|&(len, _)| len < s).min(self.lut.len() - 1).max(1);
        let (s0, u0) = self.lut[i - 1];
        let (s1, u1) = self.lut[i];
        let w = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        Ok(self.position(u0 + w * (u1 - u0)))
    }

    /// Forward tangent at arclength `s` (central finite difference).
    pub fn tangent_at(&self, s: f64) -> Result<Vec3, SplineError> {
        let eps = (self.total_len * 1e-4).max(1e-6);
        let a = self.at_arclength((s - eps).max(0.0))?;
        let b = self.at_arclength((s + eps).min(self.total_len))?;
        let d = b - a;
        if d.norm() == 0.0 {
            return Ok(Vec3::x());
        }
        Ok(d.normalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Equal control spacing makes the interpolation linear in the
    // parameter, so the arclength table is exact on this path.
    fn straight_line() -> PathSpline {
        PathSpline::new(vec![
            Vec3::new(-25.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(25.0, 0.0, 0.0),
            Vec3::new(50.0, 0.0, 0.0),
            Vec3::new(75.0, 0.0, 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn needs_four_controls() {
        let e = PathSpline::new(vec![Vec3::zeros(); 3]).unwrap_err();
        assert_eq!(e, SplineError::InsufficientControls(3));
    }

    #[test]
    fn interpolates_the_interior_controls() {
        let controls = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(20.0, 8.0, 1.0),
            Vec3::new(30.0, -3.0, 0.0),
            Vec3::new(40.0, 0.0, 2.0),
        ];
        let s = PathSpline::new(controls.clone()).unwrap();
        assert_abs_diff_eq!((s.position(0.0) - controls[1]).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((s.position(1.0) - controls[2]).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((s.position(2.0) - controls[3]).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn arclength_on_a_straight_line_is_exact() {
        let s = straight_line();
        // Interior span: from (0,0,0) to (50,0,0).
        assert_abs_diff_eq!(s.length(), 50.0, epsilon = 1e-9);
        for k in 0..=20 {
            let d = 50.0 * k as f64 / 20.0;
            let p = s.at_arclength(d).unwrap();
            assert_abs_diff_eq!(p.x, d, epsilon = 1e-6);
            assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!((s.tangent_at(25.0).unwrap() - Vec3::x()).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_speed_stepping_is_nearly_uniform_on_curves() {
        let controls: Vec<Vec3> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.7;
                Vec3::new(20.0 * a.cos(), 20.0 * a.sin(), 0.0)
            })
            .collect();
        let s = PathSpline::new(controls).unwrap();
        let steps = 100;
        let ds = s.length() / steps as f64;
        let mut prev = s.at_arclength(0.0).unwrap();
        for k in 1..=steps {
            let p = s.at_arclength(ds * k as f64).unwrap();
            let chord = (p - prev).norm();
            assert!((chord - ds).abs() < 0.05 * ds, "step {k}: chord {chord} vs {ds}");
            prev = p;
        }
    }

    #[test]
    fn rejects_out_of_domain_lookups() {
        let s = straight_line();
        assert!(matches!(s.at_arclength(-0.1), Err(SplineError::OutOfDomain { .. })));
        assert!(matches!(s.at_arclength(50.1), Err(SplineError::OutOfDomain { .. })));
        assert!(s.at_arclength(s.length()).is_ok());
    }

    #[test]
    fn affine_heights_commute_with_interpolation() {
        // If control z is an affine function of (x, y), the interpolated z
        // obeys the same function: paths laid on planar terrain stay on it.
        let f = |x: f64, y: f64| 0.12 * x - 0.05 * y + 3.0;
        let controls: Vec<Vec3> = [(0.0, 0.0), (8.0, 2.0), (15.0, -4.0), (22.0, 3.0), (30.0, 0.0)]
            .iter()
            .map(|&(x, y)| Vec3::new(x, y, f(x, y)))
            .collect();
        let s = PathSpline::new(controls).unwrap();
        for k in 0..=40 {
            let p = s.position(2.0 * k as f64 / 40.0);
            assert_abs_diff_eq!(p.z, f(p.x, p.y), epsilon = 1e-9);
        }
    }
}
