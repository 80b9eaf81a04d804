//! Desk-scale urban driving stack: map-relative localization, road-graph
//! route and motion planning, overtaking behavior planning, a deterministic
//! scenario simulator, and trajectory-similarity analysis.

// Negated comparisons double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod behavior;
pub mod geom;
pub mod localization;
pub mod motion;
mod parallel;
pub mod pointcloud;
pub mod roadgraph;
pub mod sim;

pub use geom::{FrenetCoord, OrientedBox, Pose2, Transform2, Vec2};
