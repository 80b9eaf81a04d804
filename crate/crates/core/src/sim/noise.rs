use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{Pose2, Transform2};
use crate::pointcloud::{Frame, LidarPoint, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub odom_sigma_xy: f64,
    pub odom_sigma_theta: f64,
    pub scan_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            odom_sigma_xy: 0.02,
            odom_sigma_theta: 0.002,
            scan_sigma: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            odom_sigma_xy: 0.0,
            odom_sigma_theta: 0.0,
            scan_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Odometry,
    Scan,
}

/// Seeded Gaussian noise source; odometry and scan noise use separate
/// streams so one does not shift the other.
#[derive(Debug, Clone)]
pub struct NoiseInjector {
    cfg: NoiseConfig,
    odom_rng: ChaCha8Rng,
    scan_rng: ChaCha8Rng,
    odom_pose: Transform2,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

impl NoiseInjector {
    pub fn new(seed: u64, cfg: NoiseConfig, start: Pose2) -> Self {
        let mut odom_rng = ChaCha8Rng::seed_from_u64(seed);
        odom_rng.set_stream(1);
        let mut scan_rng = ChaCha8Rng::seed_from_u64(seed);
        scan_rng.set_stream(2);
        Self {
            cfg,
            odom_rng,
            scan_rng,
            odom_pose: Transform2::from_pose(&start),
        }
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.cfg
    }

    /// Perturbs one body-frame increment.
    pub fn noisy_increment(&mut self, truth: &Transform2) -> Transform2 {
        let dx = gauss(&mut self.odom_rng, self.cfg.odom_sigma_xy);
        let dy = gauss(&mut self.odom_rng, self.cfg.odom_sigma_xy);
        let dt = gauss(&mut self.odom_rng, self.cfg.odom_sigma_theta);
        Transform2::new(truth.translation.x + dx, truth.translation.y + dy, truth.rotation + dt)
    }

    /// Accumulates a noisy increment and returns the odometry-frame pose.
    pub fn odometry(&mut self, truth_increment: &Transform2) -> Pose2 {
        let inc = self.noisy_increment(truth_increment);
        self.odom_pose = self.odom_pose.compose(&inc);
        self.odom_pose.to_pose()
    }

    /// Re-expresses map-frame points in the body frame at `truth`, jittering
    /// every coordinate.
    pub fn scan(&mut self, points: &[LidarPoint], truth: &Pose2) -> PointCloud {
        let to_body = Transform2::from_pose(truth).inverse();
        let sigma = self.cfg.scan_sigma;
        let cloud = PointCloud::new(points.to_vec(), Frame::Map).transformed(&to_body, Frame::Body);
        let points = cloud
            .points
            .into_iter()
            .map(|p| {
                LidarPoint::new(
                    p.x + gauss(&mut self.scan_rng, sigma),
                    p.y + gauss(&mut self.scan_rng, sigma),
                    p.z + gauss(&mut self.scan_rng, sigma),
                    p.r,
                )
            })
            .collect();
        PointCloud::new(points, Frame::Body)
    }

    /// Single noisy observation of `truth` by kind; scans of a pose are the
    /// pose origin expressed in its own body frame.
    pub fn inject(&mut self, truth: &Pose2, kind: NoiseKind) -> Pose2 {
        match kind {
            NoiseKind::Odometry => {
                let inc = self.noisy_increment(&Transform2::identity());
                Transform2::from_pose(truth).compose(&inc).to_pose()
            }
            NoiseKind::Scan => {
                let s = self.cfg.scan_sigma;
                Pose2::new(
                    truth.x + gauss(&mut self.scan_rng, s),
                    truth.y + gauss(&mut self.scan_rng, s),
                    truth.theta,
                )
            }
        }
    }
}
