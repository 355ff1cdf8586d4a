//! Damped constant-acceleration Kalman filter over the target trajectory.
//!
//! State is position, velocity and acceleration in the world frame. The
//! velocity and acceleration blocks decay exponentially (per-second factors
//! raised to the dt power), so during detection dropouts the free-running
//! prediction settles instead of extrapolating a stale acceleration off to
//! infinity — the predicted search window then stays near the last reliable
//! position, which is what makes prediction-guided peak selection safe.

use nalgebra::{SMatrix, SVector};

use crate::geometry::{project, Intrinsics, Pose, Vec2, Vec3};

type State = SVector<f64, 9>;
type Cov = SMatrix<f64, 9, 9>;

#[derive(Debug, Clone)]
pub struct TrajectoryConfig {
    /// Per-second velocity retention; 1.0 disables damping.
    pub lambda_v: f64,
    /// Per-second acceleration retention; 1.0 disables damping.
    pub lambda_a: f64,
    /// Process noise density on the acceleration block, m/s^2 per sqrt(s).
    pub sigma_accel: f64,
    /// Floor on the measurement standard deviation, m.
    pub min_meas_sigma: f64,
    /// Initial standard deviations for position, velocity, acceleration.
    pub init_sigma: (f64, f64, f64),
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            lambda_v: 0.9,
            lambda_a: 0.9,
            sigma_accel: 2.0,
            min_meas_sigma: 0.3,
            init_sigma: (1.0, 5.0, 2.0),
        }
    }
}

/// The transition matrix: position integrates velocity and acceleration
/// over dt, then the velocity and acceleration blocks decay.
pub fn transition(dt: f64, lambda_v: f64, lambda_a: f64) -> Cov {
    let (dv, da) = (lambda_v.powf(dt), lambda_a.powf(dt));
    let mut f = Cov::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
        f[(i, i + 6)] = 0.5 * dt * dt;
        f[(i + 3, i + 3)] = dv;
        f[(i + 3, i + 6)] = dv * dt;
        f[(i + 6, i + 6)] = da;
    }
    f
}

#[derive(Debug, Clone)]
pub struct TrajectoryFilter {
    cfg: TrajectoryConfig,
    x: State,
    p: Cov,
    initialized: bool,
}

impl TrajectoryFilter {
    pub fn new(cfg: TrajectoryConfig) -> Self {
        Self { cfg, x: State::zeros(), p: Cov::identity(), initialized: false }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn position(&self) -> Vec3 {
        self.x.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vec3 {
        self.x.fixed_rows::<3>(3).into_owned()
    }

    pub fn acceleration(&self) -> Vec3 {
        self.x.fixed_rows::<3>(6).into_owned()
    }

    pub fn covariance(&self) -> &Cov {
        &self.p
    }

    /// Propagates the state by dt. Without an initializing fix this is a
    /// no-op.
    pub fn predict(&mut self, dt: f64) {
        if !self.initialized || dt <= 0.0 {
            return;
        }
        let f = transition(dt, self.cfg.lambda_v, self.cfg.lambda_a);
        self.x = f * self.x;
        self.p = f * self.p * f.transpose();
        let q = self.cfg.sigma_accel * self.cfg.sigma_accel * dt;
        for i in 6..9 {
            self.p[(i, i)] += q;
        }
    }

    /// Fuses a position fix with standard deviation `sigma` (floored at
    /// `min_meas_sigma`). The first fix initializes the state.
    pub fn update(&mut self, z: Vec3, sigma: f64) {
        let s = sigma.max(self.cfg.min_meas_sigma);
        if !self.initialized {
            self.x = State::zeros();
            self.x.fixed_rows_mut::<3>(0).copy_from(&z);
            self.p = Cov::zeros();
            let (sp, sv, sa) = self.cfg.init_sigma;
            let sp = sp.max(s);
            for i in 0..3 {
                self.p[(i, i)] = sp * sp;
                self.p[(i + 3, i + 3)] = sv * sv;
                self.p[(i + 6, i + 6)] = sa * sa;
            }
            self.initialized = true;
            return;
        }
        let h = SMatrix::<f64, 3, 9>::identity();
        let r = SMatrix::<f64, 3, 3>::identity() * (s * s);
        let innovation = z - self.position();
        let s_mat = self.p.fixed_view::<3, 3>(0, 0) + r;
        let s_inv = s_mat.try_inverse().expect("innovation covariance is positive definite");
        let k = self.p * h.transpose() * s_inv;
        self.x += k * innovation;
        // Joseph form keeps the covariance symmetric positive definite
        // under roundoff.
        let ikh = Cov::identity() - k * h;
        self.p = ikh * self.p * ikh.transpose() + k * r * k.transpose();
        self.p = (self.p + self.p.transpose()) * 0.5;
    }
}

/// Projects a predicted world position into the camera; None when the
/// point is behind it.
pub fn predict_pixel(position: Vec3, pose: &Pose, intr: &Intrinsics) -> Option<Vec2> {
    project(position, pose, intr).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn undamped() -> TrajectoryConfig {
        TrajectoryConfig { lambda_v: 1.0, lambda_a: 1.0, ..TrajectoryConfig::default() }
    }

    #[test]
    fn converges_on_a_constant_velocity_track() {
        let mut filter = TrajectoryFilter::new(undamped());
        let vel = Vec3::new(1.5, -0.7, 0.0);
        let dt = 0.05;
        for k in 0..200 {
            let truth = Vec3::new(10.0, 5.0, 1.0) + vel * (k as f64 * dt);
            filter.predict(dt);
            filter.update(truth, 0.3);
        }
        assert!((filter.velocity() - vel).norm() < 0.05, "velocity {:?}", filter.velocity());
        // One-second-ahead prediction lands near the extrapolated truth
        // (the last update happened at k = 199).
        let mut ahead = filter.clone();
        ahead.predict(1.0);
        let truth = Vec3::new(10.0, 5.0, 1.0) + vel * (199.0 * dt + 1.0);
        assert!((ahead.position() - truth).norm() < 0.2);
    }

    /// Plain-form Kalman equations, assembled element by element straight
    /// from the standard update formulas, as an independent reference.
    struct Reference {
        x: State,
        p: Cov,
    }

    impl Reference {
        fn predict(&mut self, dt: f64, lv: f64, la: f64, sigma_a: f64) {
            let mut f = Cov::zeros();
            for i in 0..9 {
                f[(i, i)] = 1.0;
            }
            for axis in 0..3 {
                f[(axis, 3 + axis)] = dt;
                f[(axis, 6 + axis)] = dt * dt / 2.0;
                f[(3 + axis, 3 + axis)] = lv.powf(dt);
                f[(3 + axis, 6 + axis)] = lv.powf(dt) * dt;
                f[(6 + axis, 6 + axis)] = la.powf(dt);
            }
            let mut q = Cov::zeros();
            for axis in 0..3 {
                q[(6 + axis, 6 + axis)] = sigma_a * sigma_a * dt;
            }
            self.x = f * self.x;
            self.p = f * self.p * f.transpose() + q;
        }

        fn update(&mut self, z: Vec3, sigma: f64) {
            let mut h = SMatrix::<f64, 3, 9>::zeros();
            for i in 0..3 {
                h[(i, i)] = 1.0;
            }
            let r = SMatrix::<f64, 3, 3>::identity() * sigma * sigma;
            let s = h * self.p * h.transpose() + r;
            let k = self.p * h.transpose() * s.try_inverse().unwrap();
            self.x = self.x + k * (z - h * self.x);
            self.p = (Cov::identity() - k * h) * self.p;
        }
    }

    #[test]
    fn matches_the_plain_kalman_equations_without_damping() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let cfg = undamped();
            let mut filter = TrajectoryFilter::new(cfg.clone());
            let z0 = Vec3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(0.0..3.0),
            );
            filter.update(z0, 0.5);
            let mut reference = Reference { x: filter.x, p: filter.p };

            for _ in 0..60 {
                let dt = rng.random_range(0.02..0.1);
                let z = z0
                    + Vec3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-0.5..0.5),
                    );
                let sigma = rng.random_range(0.3..2.0);
                filter.predict(dt);
                reference.predict(dt, 1.0, 1.0, cfg.sigma_accel);
                filter.update(z, sigma);
                reference.update(z, sigma);
                assert!((filter.x - reference.x).abs().max() < 1e-9);
                assert!((filter.p - reference.p).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn free_run_velocity_obeys_the_damped_geometric_bound() {
        let cfg = TrajectoryConfig {
            lambda_v: 0.5,
            lambda_a: 0.4,
            ..TrajectoryConfig::default()
        };
        let mut filter = TrajectoryFilter::new(cfg.clone());
        filter.update(Vec3::new(5.0, -2.0, 1.0), 0.3);
        filter.x.fixed_rows_mut::<3>(3).copy_from(&Vec3::new(3.0, -1.0, 0.2));
        filter.x.fixed_rows_mut::<3>(6).copy_from(&Vec3::new(0.5, 1.2, -0.1));

        let dt = 0.05;
        let (lv, la) = (cfg.lambda_v.powf(dt), cfg.lambda_a.powf(dt));
        let mut v_bound = filter.velocity().norm();
        let mut a_bound = filter.acceleration().norm();
        let mut drift_bound = 0.0;
        let start = filter.position();
        for step in 1..=100 {
            filter.predict(dt);
            // Triangle inequality on the velocity row of the transition,
            // with the acceleration shrinking geometrically.
            drift_bound += v_bound * dt + 0.5 * a_bound * dt * dt;
            v_bound = lv * (v_bound + a_bound * dt);
            a_bound *= la;
            assert!(
                filter.velocity().norm() <= v_bound + 1e-12,
                "step {step}: {} > {v_bound}",
                filter.velocity().norm()
            );
            assert!((filter.position() - start).norm() <= drift_bound + 1e-12);
        }
        // The closed form of the recursion: a_k = a0 mu^k and
        // v_k = lv^k v0 + dt sum_{i<k} lv^(k-i) a0 mu^i, a geometric series.
        let (v0, a0) = (Vec3::new(3.0, -1.0, 0.2).norm(), Vec3::new(0.5, 1.2, -0.1).norm());
        let k = 100;
        let mut series = 0.0;
        for i in 0..k {
            series += lv.powi((k - i) as i32) * la.powi(i as i32);
        }
        let closed = lv.powi(k as i32) * v0 + dt * a0 * series;
        assert_abs_diff_eq!(v_bound, closed, epsilon = 1e-9);
        // Damping well below 1 forces the bound itself toward zero.
        assert!(v_bound < 0.1 * v0);
    }

    #[test]
    fn measurement_sigma_is_floored() {
        let mut a = TrajectoryFilter::new(TrajectoryConfig::default());
        let mut b = TrajectoryFilter::new(TrajectoryConfig::default());
        for (k, filter) in [(0.01, &mut a), (0.3, &mut b)] {
            filter.update(Vec3::zeros(), 0.3);
            filter.predict(0.05);
            filter.update(Vec3::new(1.0, 0.0, 0.0), k);
        }
        assert_abs_diff_eq!((a.x - b.x).abs().max(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((a.p - b.p).abs().max(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn trace_shrinks_on_update_and_grows_on_predict() {
        // With damping off, prediction mixes process noise in (trace up)
        // and a measurement can only remove uncertainty (trace down).
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut filter = TrajectoryFilter::new(undamped());
        filter.update(Vec3::zeros(), 0.5);
        for _ in 0..100 {
            let before = filter.covariance().trace();
            filter.predict(rng.random_range(0.01..0.2));
            let mid = filter.covariance().trace();
            assert!(mid >= before - 1e-12);
            filter.update(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
                rng.random_range(0.0..2.0),
            );
            assert!(filter.covariance().trace() <= mid + 1e-12);
        }
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut filter = TrajectoryFilter::new(TrajectoryConfig::default());
        filter.update(Vec3::zeros(), 0.3);
        for _ in 0..500 {
            filter.predict(rng.random_range(0.01..0.2));
            if rng.random_range(0.0..1.0) < 0.7 {
                let z = Vec3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-2.0..2.0),
                );
                filter.update(z, rng.random_range(0.0..3.0));
            }
        }
        let p = filter.covariance();
        assert!((p - p.transpose()).abs().max() < 1e-12);
        let eig = p.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0), "{:?}", eig.eigenvalues);
    }

    #[test]
    fn prediction_projects_into_the_camera() {
        let intr = Intrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480);
        let pose = Pose::new(
            nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
                1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
            )),
            Vec3::new(0.0, 0.0, 30.0),
        );
        let px = predict_pixel(Vec3::new(1.0, 2.0, 0.0), &pose, &intr).unwrap();
        assert_abs_diff_eq!(px.x, 320.0 + 400.0 / 30.0, epsilon = 1e-9);
        // The nadir camera flips world y onto -y of the image.
        assert_abs_diff_eq!(px.y, 240.0 - 400.0 * 2.0 / 30.0, epsilon = 1e-9);
        assert!(predict_pixel(Vec3::new(0.0, 0.0, 40.0), &pose, &intr).is_none());
    }
}
