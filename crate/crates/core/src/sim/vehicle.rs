use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geom::{normalize_angle, OrientedBox, Pose2, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2,
    pub speed: f64,
    pub steer: f64,
    pub wheelbase: f64,
    /// Half length and half width.
    pub half_extents: (f64, f64),
    pub steer_max: f64,
    /// Steering slew limit in rad/s.
    pub steer_rate: f64,
}

impl VehicleState {
    pub fn new(pose: Pose2, speed: f64) -> Self {
        Self {
            pose,
            speed,
            steer: 0.0,
            wheelbase: 2.7,
            half_extents: (2.25, 0.9),
            steer_max: 0.6,
            steer_rate: 1.2,
        }
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.pose.position(), self.pose.theta, self.half_extents.0, self.half_extents.1)
    }
}

/// Kinematic bicycle update with slew- and range-limited steering.
pub fn step_vehicle(state: &VehicleState, steer_cmd: f64, accel_cmd: f64, dt: f64) -> VehicleState {
    let slew = state.steer_rate * dt;
    let steer = steer_cmd
        .clamp(state.steer - slew, state.steer + slew)
        .clamp(-state.steer_max, state.steer_max);
    let v = state.speed;
    let th = state.pose.theta;
    let pose = Pose2 {
        x: state.pose.x + v * th.cos() * dt,
        y: state.pose.y + v * th.sin() * dt,
        theta: normalize_angle(th + v / state.wheelbase * steer.tan() * dt),
    };
    VehicleState {
        pose,
        speed: (v + accel_cmd * dt).max(0.0),
        steer,
        ..*state
    }
}

/// Pure-pursuit steering toward the point where the path leaves the
/// lookahead circle, searching forward from the closest path vertex.
pub fn pure_pursuit_steer(state: &VehicleState, path: &[Vec2], lookahead: f64) -> Result<f64, SimError> {
    if path.is_empty() || !(lookahead > 0.0) {
        return Err(SimError::PathExhausted);
    }
    let p = state.pose.position();
    let nearest = path
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, q)| {
            let d = (q - p).norm();
            if d < acc.1 {
                (i, d)
            } else {
                acc
            }
        })
        .0;
    let n = path.len();
    if nearest == n - 1 && n >= 2 && (p - path[n - 1]).dot(&(path[n - 1] - path[n - 2])) > 0.0 {
        return Err(SimError::PathExhausted);
    }
    let mut target = None;
    if (path[nearest] - p).norm() >= lookahead {
        target = Some(path[nearest]);
    } else {
        for w in path[nearest..].windows(2) {
            if (w[1] - p).norm() >= lookahead {
                // Far root of |a + u (b - a) - p| = lookahead on the segment.
                let d = w[1] - w[0];
                let f = w[0] - p;
                let a = d.dot(&d);
                let b = 2.0 * f.dot(&d);
                let c = f.dot(&f) - lookahead * lookahead;
                let disc = (b * b - 4.0 * a * c).max(0.0);
                let u = ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, 1.0);
                target = Some(w[0] + d * u);
                break;
            }
        }
    }
    let target = target.ok_or(SimError::PathExhausted)?;
    let rel = target - p;
    let alpha = normalize_angle(rel.y.atan2(rel.x) - state.pose.theta);
    let ld = rel.norm();
    let steer = (2.0 * state.wheelbase * alpha.sin() / ld).atan();
    Ok(steer.clamp(-state.steer_max, state.steer_max))
}
