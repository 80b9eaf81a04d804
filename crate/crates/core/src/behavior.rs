//! Task-specific path selection, stuck detection, car following and
//! geometry-aware velocity blending for overtaking.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{cumulative_lengths, frenet_project, OrientedBox, Pose2, Vec2};
use crate::roadgraph::ExtendedRoadGraph;

pub const DEFAULT_STUCK_THRESHOLD: u32 = 30;
pub const STUCK_SPEED: f64 = 0.1;
/// Agents farther than this from every lattice row move in a straight line.
pub const ON_ROAD_LATERAL: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum BehaviorError {
    #[error("distance pair sums to {0}, velocity blend undefined")]
    DegenerateGeometry(f64),
    #[error("aggressiveness {0} outside [0, 1]")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentTrack {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    /// Half length and half width of the footprint.
    pub footprint: (f64, f64),
    pub heading: f64,
    /// Future (position, velocity) every `prediction_dt` seconds.
    pub predicted: Vec<(Vec2, Vec2)>,
    pub prediction_dt: f64,
}

impl AgentTrack {
    pub fn new(id: u32, pose: &Pose2, speed: f64, footprint: (f64, f64)) -> Self {
        Self {
            id,
            position: pose.position(),
            velocity: pose.heading() * speed,
            footprint,
            heading: pose.theta,
            predicted: Vec::new(),
            prediction_dt: 0.0,
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    pub fn footprint_box(&self) -> OrientedBox {
        OrientedBox::new(self.position, self.heading, self.footprint.0, self.footprint.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalPhase {
    Red,
    Yellow,
    Green,
    GreenLeft,
}

impl fmt::Display for SignalPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Red => "red",
            Self::Yellow => "yellow",
            Self::Green => "green",
            Self::GreenLeft => "green_left",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub intersection: String,
    pub phase: SignalPhase,
    pub remaining: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TurnScenario {
    Straight,
    TurnLeft,
    TurnRight,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TspsInput {
    pub route_feasible: bool,
    pub micro_feasible: bool,
    pub stuck_counter: u32,
    pub near_signal: bool,
    pub signal: Option<SignalState>,
    pub turn_scenario: TurnScenario,
    pub side_area_occupied: bool,
    pub ego_speed: f64,
    /// The route is obstructed at zero clearance, not merely inside the margin.
    pub route_blocked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathDecision {
    GlobalRoute,
    MicroPath,
    EgoLane,
    Halt,
}

impl fmt::Display for PathDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GlobalRoute => "global_route",
            Self::MicroPath => "micro_path",
            Self::EgoLane => "ego_lane",
            Self::Halt => "halt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccConfig {
    pub time_headway: f64,
    pub standstill_gap: f64,
    pub k_gap: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub v_limit: f64,
    pub dt: f64,
}

impl Default for AccConfig {
    fn default() -> Self {
        Self {
            time_headway: 1.5,
            standstill_gap: 2.0,
            k_gap: 0.5,
            max_accel: 2.0,
            max_decel: 6.0,
            v_limit: 8.0,
            dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GvpConfig {
    pub tau: f64,
    pub acc: AccConfig,
}

impl Default for GvpConfig {
    fn default() -> Self {
        Self {
            tau: 0.75,
            acc: AccConfig::default(),
        }
    }
}

fn row_polyline(lattice: &ExtendedRoadGraph, k: usize) -> Vec<Vec2> {
    lattice.layers.iter().map(|l| l[k].position()).collect()
}

/// Point at `station` along `pts`, continuing straight past either end.
fn walk(pts: &[Vec2], cum: &[f64], station: f64) -> (Vec2, Vec2) {
    let n = pts.len();
    let i = cum.partition_point(|c| *c <= station).clamp(1, n - 1);
    let seg = pts[i] - pts[i - 1];
    let len = seg.norm();
    let dir = if len > 0.0 { seg / len } else { Vec2::new(1.0, 0.0) };
    (pts[i - 1] + dir * (station - cum[i - 1]), dir)
}

/// Constant-speed predictions: along the nearest lattice row, keeping the
/// current lateral offset, when within [`ON_ROAD_LATERAL`] of one; straight
/// ahead otherwise.
pub fn predict_agents(tracks: &[AgentTrack], lattice: &ExtendedRoadGraph, horizon: f64, dt: f64) -> Vec<AgentTrack> {
    let steps = if horizon > 0.0 && dt > 0.0 {
        (horizon / dt).round() as usize
    } else {
        0
    };
    let rows: Vec<Vec<Vec2>> = if lattice.layers.len() >= 2 {
        (0..lattice.offsets.len()).map(|k| row_polyline(lattice, k)).collect()
    } else {
        Vec::new()
    };
    tracks
        .iter()
        .map(|track| {
            let speed = track.speed();
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for (k, row) in rows.iter().enumerate() {
                if let Ok(f) = frenet_project(row, &track.position) {
                    if f.lateral.abs() <= ON_ROAD_LATERAL && best.is_none_or(|(d, ..)| f.lateral.abs() < d) {
                        best = Some((f.lateral.abs(), k, f.station, f.lateral));
                    }
                }
            }
            let predicted = match best {
                Some((_, k, s0, lateral)) => {
                    let row = &rows[k];
                    let cum = cumulative_lengths(row);
                    let (_, tangent) = walk(row, &cum, s0);
                    let sign = if track.velocity.dot(&tangent) < 0.0 { -1.0 } else { 1.0 };
                    (1..=steps)
                        .map(|i| {
                            let (p, dir) = walk(row, &cum, s0 + sign * speed * dt * i as f64);
                            (p + Vec2::new(-dir.y, dir.x) * lateral, dir * (sign * speed))
                        })
                        .collect()
                }
                None => (1..=steps)
                    .map(|i| (track.position + track.velocity * (dt * i as f64), track.velocity))
                    .collect(),
            };
            AgentTrack {
                predicted,
                prediction_dt: dt,
                ..track.clone()
            }
        })
        .collect()
}

/// Counts consecutive stopped cycles, except while held at a red light.
pub fn update_stuck_counter(counter: u32, ego_speed: f64, signal: Option<&SignalState>) -> u32 {
    if ego_speed >= STUCK_SPEED {
        0
    } else if signal.is_some_and(|s| s.phase == SignalPhase::Red) {
        counter
    } else {
        counter.saturating_add(1)
    }
}

/// Path selection, checked in this order:
///
/// | # | condition                                  | decision                    |
/// |---|--------------------------------------------|-----------------------------|
/// | 1 | route feasible                             | GlobalRoute                 |
/// | 2 | stuck counter ≥ threshold                  | MicroPath                   |
/// | 3 | micro path infeasible                      | GlobalRoute (Halt if blocked) |
/// | 4 | near a signal while turning left or right  | GlobalRoute (Halt if blocked) |
/// | 5 | side safety area occupied                  | EgoLane                     |
/// | 6 | otherwise                                  | MicroPath                   |
pub fn tsps_decide(input: &TspsInput, stuck_threshold: u32) -> PathDecision {
    let keep_route = if input.route_blocked {
        PathDecision::Halt
    } else {
        PathDecision::GlobalRoute
    };
    if input.route_feasible {
        PathDecision::GlobalRoute
    } else if input.stuck_counter >= stuck_threshold {
        PathDecision::MicroPath
    } else if !input.micro_feasible || (input.near_signal && input.turn_scenario != TurnScenario::Straight) {
        keep_route
    } else if input.side_area_occupied {
        PathDecision::EgoLane
    } else {
        PathDecision::MicroPath
    }
}

/// Constant-time-gap target before acceleration limits.
pub fn acc_target(gap: f64, lead_speed: f64, ego_speed: f64, cfg: &AccConfig) -> f64 {
    let v = lead_speed + cfg.k_gap * (gap - cfg.standstill_gap - cfg.time_headway * ego_speed);
    v.clamp(0.0, cfg.v_limit)
}

/// Commanded speed for one control step behind a lead vehicle.
pub fn acc_speed(gap: f64, lead_speed: f64, ego_speed: f64, cfg: &AccConfig) -> f64 {
    let target = acc_target(gap, lead_speed, ego_speed, cfg);
    target
        .clamp(ego_speed - cfg.max_decel * cfg.dt, ego_speed + cfg.max_accel * cfg.dt)
        .max(0.0)
}

fn blend(v_t: f64, v_e: f64, d_t: f64, d_e: f64) -> Result<f64, BehaviorError> {
    let sum = d_t + d_e;
    if !(sum > 0.0) {
        return Err(BehaviorError::DegenerateGeometry(sum));
    }
    let w_t = 1.0 - d_t / sum;
    let w_e = 1.0 - d_e / sum;
    debug_assert!((w_t + w_e - 1.0).abs() < 1e-12);
    Ok(w_t * v_t + w_e * v_e)
}

/// `tau * v_micro + (1 - tau) * v_cog`, where each term weights the target
/// and ego lane commands by lateral closeness.
#[allow(clippy::too_many_arguments)]
pub fn gvp_velocity(
    v_t: f64,
    v_e: f64,
    d_t_t: f64,
    d_e_t: f64,
    d_t_e: f64,
    d_e_e: f64,
    tau: f64,
) -> Result<f64, BehaviorError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(BehaviorError::InvalidTau(tau));
    }
    let v_micro = blend(v_t, v_e, d_t_t, d_e_t)?;
    let v_cog = blend(v_t, v_e, d_t_e, d_e_e)?;
    let v = tau * v_micro + (1.0 - tau) * v_cog;
    Ok(v.clamp(v_t.min(v_e), v_t.max(v_e)))
}

/// Whether any agent intrudes on the area beside the ego: from the rear
/// bumper to 1.5 vehicle lengths ahead, one lane wide, `shift` to the left.
pub fn side_area_occupied(
    ego: &Pose2,
    shift: f64,
    lane_width: f64,
    vehicle_length: f64,
    agents: &[AgentTrack],
) -> bool {
    let rear = -0.5 * vehicle_length;
    let front = 1.5 * vehicle_length;
    let h = ego.heading();
    let n = Vec2::new(-h.y, h.x);
    let center = ego.position() + h * (0.5 * (rear + front)) + n * shift;
    let area = OrientedBox::new(center, ego.theta, 0.5 * (front - rear), 0.5 * lane_width);
    agents.iter().any(|a| area.overlaps(&a.footprint_box()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionTraceRow {
    pub t: f64,
    pub choice: PathDecision,
    pub stuck_counter: u32,
    pub tau: f64,
    pub v_t: f64,
    pub v_e: f64,
    pub v_ref: f64,
}

pub fn decision_trace_csv(rows: &[DecisionTraceRow]) -> String {
    let mut out = String::from("t,choice,stuck_counter,tau,v_T,v_E,v_ref\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t, r.choice, r.stuck_counter, r.tau, r.v_t, r.v_e, r.v_ref
        );
    }
    out
}
