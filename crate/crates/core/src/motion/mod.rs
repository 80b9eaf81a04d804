//! Two-level motion planning: a dynamic-programming sweep over the state
//! lattice picks a coarse path, then quintic primitives refine it.

mod macro_plan;
mod micro;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2, Vec2};

pub use macro_plan::{plan_macro, MacroPath, MacroWeights};
pub use micro::{
    generate_primitive, planner_debug_json, sample_primitive_set, select_micro, to_curvilinear, BoundaryState,
    CurvilinearPoint, MicroSelection, MicroWeights, MotionPrimitive, PlannerDebugRecord, PRIMITIVE_SAMPLES,
};

pub const DEFAULT_VEHICLE_WIDTH: f64 = 1.8;
pub const DEFAULT_VEHICLE_LENGTH: f64 = 4.5;

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("every lattice path is blocked")]
    NoFeasiblePath,
    #[error("quintic system is singular for duration {0} s")]
    SingularSystem(f64),
    #[error("primitive is too short to parameterize by arc length")]
    DegeneratePrimitive,
    #[error("every candidate primitive is blocked")]
    AllPrimitivesBlocked,
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
}

/// Circular keep-out region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(x: f64, y: f64, radius: f64) -> Self {
        Self { x, y, radius }
    }

    /// Three discs covering a vehicle footprint, front to back.
    pub fn vehicle(pose: &Pose2, length: f64, width: f64) -> [Obstacle; 3] {
        let third = length / 3.0;
        let radius = f64::hypot(third / 2.0, width / 2.0);
        let h = pose.heading();
        [1.0, 0.0, -1.0].map(|k| {
            let c = pose.position() + h * (k * third);
            Obstacle::new(c.x, c.y, radius)
        })
    }

    pub fn clearance(&self, p: &Vec2) -> f64 {
        f64::hypot(p.x - self.x, p.y - self.y) - self.radius
    }
}

/// Hard margin and barrier shape for obstacle costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Clearance {
    pub vehicle_width: f64,
    pub c_max: f64,
}

impl Default for Clearance {
    fn default() -> Self {
        Self {
            vehicle_width: DEFAULT_VEHICLE_WIDTH,
            c_max: 10.0,
        }
    }
}

impl Clearance {
    pub fn c_min(&self) -> f64 {
        0.5 * self.vehicle_width + 0.3
    }

    /// Inverse-clearance barrier, zero beyond `c_max`.
    pub fn phi(&self, c: f64) -> f64 {
        (1.0 / c - 1.0 / self.c_max).max(0.0)
    }
}

/// Smallest clearance from `p` to any obstacle (infinite when there are none).
pub fn min_clearance(obstacles: &[Obstacle], p: &Vec2) -> f64 {
    obstacles.iter().map(|o| o.clearance(p)).fold(f64::INFINITY, f64::min)
}
