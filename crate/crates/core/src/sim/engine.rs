use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::noise::NoiseInjector;
use super::scenario::{LocalizationSource, NpcConfig, ScenarioConfig};
use super::signal::{spat_feed, SignalSchedule};
use super::vehicle::{pure_pursuit_steer, step_vehicle, VehicleState};
use super::world::{World, WorldConfig};
use super::SimError;
use crate::behavior::{
    acc_speed, acc_target, gvp_velocity, predict_agents, side_area_occupied, tsps_decide, update_stuck_counter, AccConfig,
    AgentTrack, PathDecision, SignalPhase, SignalState, TspsInput, TurnScenario,
};
use crate::geom::{
    cumulative_lengths, frenet_project, frenet_project_near, normalize_angle, polyline_length, polyline_sample, Pose2, Transform2,
    Vec2,
};
use crate::localization::{localization_step, LocalizerState, OdometryTrack};
use crate::motion::{
    min_clearance, plan_macro, sample_primitive_set, select_micro, BoundaryState, MacroPath, MotionPrimitive,
    Obstacle, DEFAULT_VEHICLE_LENGTH, DEFAULT_VEHICLE_WIDTH,
};
use crate::pointcloud::{voxelize, Frame, MapStore, PointCloud};
use crate::roadgraph::{build_extended_graph, plan_route, plan_route_via, ExtendedRoadGraph, RoadGraph, Route};

/// Comfortable deceleration used to decide whether to stop for yellow.
const YELLOW_DECEL: f64 = 3.0;
/// Distance before a stop line at which the signal counts as near.
const SIGNAL_RANGE: f64 = 40.0;
/// Lateral span of micro candidates around the macro path.
const MICRO_SPREAD: f64 = 1.0;
const EMERGENCY: AccConfig = AccConfig {
    time_headway: 0.3,
    standstill_gap: 1.0,
    k_gap: 1.0,
    max_accel: 2.0,
    max_decel: 6.0,
    v_limit: f64::INFINITY,
    dt: 0.1,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub ego: Pose2,
    pub speed: f64,
    pub steer: f64,
    pub decision: PathDecision,
    pub v_ref: f64,
    pub v_target: f64,
    pub v_ego_lane: f64,
    pub stuck_counter: u32,
    /// Ego distance along the route.
    pub station: f64,
    /// Pose used by the planner; differs from `ego` in replay mode.
    pub estimate: Pose2,
    pub agents: Vec<Pose2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Overtake,
    Collision,
    SignalViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub t: f64,
    pub kind: EventKind,
    /// NPC index (1-based); 0 for the ego.
    pub agent: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    /// Ego distance along the route at the end of the run.
    pub progress: f64,
    pub route_length: f64,
    /// Smallest disc-model gap between the ego and any NPC.
    pub min_clearance: f64,
    pub lap_times: Vec<f64>,
    pub completed: bool,
    pub completion_time: Option<f64>,
    pub min_speed: f64,
    pub mean_speed: f64,
    pub overtakes: usize,
    pub collisions: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimLog {
    pub dt: f64,
    pub seed: u64,
    pub tau: f64,
    pub records: Vec<StepRecord>,
    pub events: Vec<SimEvent>,
    pub metrics: SimMetrics,
}

impl SimLog {
    pub fn to_csv(&self) -> String {
        let n = self.records.first().map_or(0, |r| r.agents.len());
        let mut out = String::from("t,x,y,theta,speed,steer,decision,v_ref,v_target,v_ego_lane,stuck_counter,station");
        for i in 1..=n {
            let _ = write!(out, ",npc{i}_x,npc{i}_y,npc{i}_theta");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.ego.x,
                r.ego.y,
                r.ego.theta,
                r.speed,
                r.steer,
                r.decision,
                r.v_ref,
                r.v_target,
                r.v_ego_lane,
                r.stuck_counter,
                r.station
            );
            for a in &r.agents {
                let _ = write!(out, ",{},{},{}", a.x, a.y, a.theta);
            }
            out.push('\n');
        }
        out
    }

    /// Per-cycle behavior trace: `t,choice,stuck_counter,tau,v_T,v_E,v_ref`.
    pub fn decisions_csv(&self) -> String {
        let mut out = String::from("t,choice,stuck_counter,tau,v_T,v_E,v_ref\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t, r.decision, r.stuck_counter, self.tau, r.v_target, r.v_ego_lane, r.v_ref
            );
        }
        out
    }

    /// Ego positions as `team,t,x,y` rows, the trajectory analyzer's input.
    pub fn trajectory_csv(&self, team: &str) -> String {
        let mut out = String::from("team,t,x,y\n");
        for r in &self.records {
            let _ = writeln!(out, "{team},{},{},{}", r.t, r.ego.x, r.ego.y);
        }
        out
    }

    pub fn events_json(&self) -> String {
        serde_json::to_string_pretty(&self.events).expect("events serialize")
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize")
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// One NPC driving open loop along its lane chain.
#[derive(Debug, Clone)]
struct Npc {
    cfg: NpcConfig,
    lane: Vec<Vec2>,
    cum: Vec<f64>,
    /// Stations along `lane` of stop lines, with their intersection.
    stops: Vec<(f64, String)>,
    s: f64,
    v: f64,
    half: (f64, f64),
}

impl Npc {
    fn pose(&self) -> Pose2 {
        let (p, t) = polyline_sample(&self.lane, &self.cum, self.s);
        Pose2::new(p.x, p.y, t.y.atan2(t.x))
    }

    fn end(&self) -> f64 {
        *self.cum.last().unwrap()
    }
}

/// Stations along `reference` passing within `reach` of stop-line nodes,
/// one per visit.
fn stop_stations(graph: &RoadGraph, reference: &[Vec2], cum: &[f64], reach: f64) -> Vec<(f64, String)> {
    let mut out: Vec<(f64, String)> = Vec::new();
    for node in graph.stop_lines() {
        let p = node.position();
        let name = node.signal.clone().unwrap_or_default();
        let mut hits: Vec<f64> = Vec::new();
        for (i, w) in reference.windows(2).enumerate() {
            let (u, q) = crate::geom::project_on_segment(&w[0], &w[1], &p);
            if (q - p).norm() <= reach {
                let s = cum[i] + u * (cum[i + 1] - cum[i]);
                if hits.last().is_none_or(|h| s - h > 10.0) {
                    hits.push(s);
                }
            }
        }
        for s in hits {
            if !out.iter().any(|(o, n)| *n == name && (o - s).abs() < 10.0) {
                out.push((s, name.clone()));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    out
}

fn lane_chain(graph: &RoadGraph, start: &str, min_length: f64) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = Vec::new();
    let mut link = start.to_string();
    loop {
        for p in graph.link_polyline(&link) {
            if pts.last().is_none_or(|q| (q - p).norm() > 1e-9) {
                pts.push(*p);
            }
        }
        let len = crate::geom::polyline_length(&pts);
        match graph.links[&link].successors.first() {
            Some(next) if len < min_length => link = next.clone(),
            _ => break,
        }
    }
    pts
}

fn signal_at(schedules: &BTreeMap<String, SignalSchedule>, name: &str, t: f64) -> Option<SignalState> {
    schedules.get(name).map(|s| spat_feed(t, s))
}

/// Whether a vehicle at speed `v`, `dist` before a stop line, must hold.
fn must_stop(state: &SignalState, v: f64, dist: f64) -> bool {
    match state.phase {
        SignalPhase::Red => true,
        SignalPhase::Yellow => v * v / (2.0 * YELLOW_DECEL) < dist - 1.0,
        _ => false,
    }
}

fn nearest_index(offsets: &[f64], lateral: f64) -> usize {
    let mut best = 0;
    for (k, o) in offsets.iter().enumerate() {
        if (o - lateral).abs() < (offsets[best] - lateral).abs() {
            best = k;
        }
    }
    best
}

struct Localizer {
    world: World,
    store: MapStore,
    noise: NoiseInjector,
    scan_rng: ChaCha8Rng,
    odom: OdometryTrack,
    state: LocalizerState,
}

/// Runs the scenario to its duration (or the goal) at a fixed step.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimLog, SimError> {
    cfg.validate()?;
    let graph = cfg.load_map()?;
    let waypoints = cfg.waypoints();
    for w in &waypoints {
        graph
            .node(w)
            .map_err(|_| SimError::ConfigError(format!("`start`/`goal`/`via`: unknown node `{w}`")))?;
    }
    for (i, n) in cfg.npcs.iter().enumerate() {
        if !graph.links.contains_key(&n.link) {
            return Err(SimError::ConfigError(format!("`npcs[{i}].link`: unknown link `{}`", n.link)));
        }
    }
    let route = plan_route_via(&graph, &waypoints).map_err(|e| SimError::ConfigError(format!("route: {e}")))?;
    // Lap boundaries fall where the route returns to the start node.
    let mut boundaries = Vec::new();
    let mut acc_len = 0.0;
    for pair in waypoints.windows(2) {
        acc_len += plan_route(&graph, &pair[0], &pair[1]).map(|r| r.length()).unwrap_or(0.0);
        if pair[1] == waypoints[0] {
            boundaries.push(acc_len);
        }
    }
    let pc = &cfg.planner;
    let lattice = build_extended_graph(&graph, &route, pc.station_step, &pc.lateral_offsets)
        .map_err(|e| SimError::ConfigError(format!("lattice: {e}")))?;
    // The lattice centerline is a resampled, slightly shorter copy of the route.
    let scale = polyline_length(&lattice.centerline()) / acc_len.max(f64::EPSILON);
    let boundaries = boundaries.into_iter().map(|b| b * scale).collect();
    Engine::new(cfg, graph, lattice, boundaries)?.run()
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    lattice: ExtendedRoadGraph,
    center: Vec<Vec2>,
    center_cum: Vec<f64>,
    route_length: f64,
    stops: Vec<(f64, String)>,
    schedules: BTreeMap<String, SignalSchedule>,
    lap_boundaries: Vec<f64>,
    ego: VehicleState,
    npcs: Vec<Npc>,
    perception_rng: ChaCha8Rng,
    localizer: Option<Localizer>,
    acc: AccConfig,
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a ScenarioConfig,
        graph: RoadGraph,
        lattice: ExtendedRoadGraph,
        lap_boundaries: Vec<f64>,
    ) -> Result<Self, SimError> {
        let center = lattice.centerline();
        let center_cum = cumulative_lengths(&center);
        let route_length = *center_cum.last().unwrap();
        let stops = stop_stations(&graph, &center, &center_cum, 0.75 * pc_span(&cfg.planner.lateral_offsets));
        let schedules = cfg.signals.iter().map(|s| (s.intersection.clone(), s.clone())).collect();
        let (p, t) = polyline_sample(&center, &center_cum, cfg.ego.start_station);
        let start = Pose2::new(p.x, p.y, t.y.atan2(t.x));
        let ego = VehicleState::new(start, cfg.ego.start_speed.min(cfg.ego.acc.v_limit));
        let horizon = cfg.duration * cfg.npcs.iter().map(|n| n.speed).fold(0.0, f64::max).max(1.0);
        let mut npcs = Vec::new();
        for n in &cfg.npcs {
            let profile_max = n.profile.iter().map(|p| p[1]).fold(n.speed, f64::max);
            let lane = lane_chain(&graph, &n.link, n.station + horizon.max(profile_max * cfg.duration) + 50.0);
            let cum = cumulative_lengths(&lane);
            let stops = stop_stations(&graph, &lane, &cum, 1.0);
            npcs.push(Npc {
                cfg: n.clone(),
                s: n.station.min(*cum.last().unwrap()),
                v: n.desired_speed(0.0),
                lane,
                cum,
                stops,
                half: (0.5 * DEFAULT_VEHICLE_LENGTH, 0.5 * DEFAULT_VEHICLE_WIDTH),
            });
        }
        let mut perception_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        perception_rng.set_stream(3);
        let localizer = match cfg.localization.mode {
            LocalizationSource::Truth => None,
            LocalizationSource::Replay => {
                let setup = &cfg.localization;
                let world = World::generate(
                    &graph,
                    &WorldConfig {
                        seed: cfg.seed,
                        ..WorldConfig::default()
                    },
                );
                let map_cloud = PointCloud::new(world.map_points(cfg.seed ^ 0x5eed, setup.map_density), Frame::Map);
                let grid = voxelize(&map_cloud, setup.localizer.voxel_size)
                    .map_err(|e| SimError::MapLoadError(format!("map voxelization: {e}")))?;
                let store = MapStore::new(grid, Pose2::default());
                let noise = NoiseInjector::new(cfg.seed, setup.noise, start);
                let mut scan_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                scan_rng.set_stream(4);
                let mut odom = OdometryTrack::default();
                odom.push(0.0, start).map_err(|e| SimError::ConfigError(e.to_string()))?;
                Some(Localizer {
                    world,
                    store,
                    noise,
                    scan_rng,
                    odom,
                    state: LocalizerState::new(0.0, start),
                })
            }
        };
        let acc = AccConfig {
            dt: cfg.dt,
            ..cfg.ego.acc
        };
        Ok(Self {
            cfg,
            lattice,
            center,
            center_cum,
            route_length,
            stops,
            schedules,
            lap_boundaries,
            ego,
            npcs,
            perception_rng,
            localizer,
            acc,
        })
    }

    fn project(&self, p: &Vec2, hint: f64, window: f64) -> Option<(f64, f64)> {
        frenet_project_near(&self.center, &self.center_cum, p, hint, window).map(|f| (f.station, f.lateral))
    }

    fn perceive(&mut self) -> Vec<AgentTrack> {
        let sigma = self.cfg.perception_sigma;
        let npcs: Vec<(Pose2, f64, (f64, f64))> = self.npcs.iter().map(|n| (n.pose(), n.v, n.half)).collect();
        npcs.into_iter()
            .enumerate()
            .map(|(i, (mut pose, v, half))| {
                if sigma > 0.0 {
                    let d = Normal::new(0.0, sigma).expect("finite sigma");
                    pose.x += d.sample(&mut self.perception_rng);
                    pose.y += d.sample(&mut self.perception_rng);
                }
                AgentTrack::new(i as u32 + 1, &pose, v, half)
            })
            .collect()
    }

    /// Car-following target for lane `k` given leads in it and the next stop
    /// line, before acceleration limits.
    fn lane_speed(&self, k: usize, agents: &[(f64, f64, f64, f64)], s_ego: f64, v: f64, signal_stop: Option<f64>) -> f64 {
        let offsets = &self.lattice.offsets;
        let mut gap = f64::INFINITY;
        let mut lead_v = 0.0;
        for &(s, l, speed, half_len) in agents {
            if nearest_index(offsets, l) == k && s > s_ego {
                let g = s - s_ego - self.ego.half_extents.0 - half_len;
                if g < gap {
                    gap = g;
                    lead_v = speed;
                }
            }
        }
        if let Some(stop) = signal_stop {
            let g = stop - s_ego - self.ego.half_extents.0;
            if g < gap {
                gap = g;
                lead_v = 0.0;
            }
        }
        acc_target(gap, lead_v, v, &self.acc)
    }

    fn run(mut self) -> Result<SimLog, SimError> {
        let cfg = self.cfg;
        let dt = cfg.dt;
        let steps = cfg.steps();
        let offsets = self.lattice.offsets.clone();
        let c_idx = self.lattice.center_index();
        let step = self.lattice.station_step();
        let n_layers = self.lattice.layers.len();
        let clearance = cfg.planner.macro_weights.clearance;
        let mut records = Vec::with_capacity(steps + 1);
        let mut events = Vec::new();
        let mut s_ego = self.project(&self.ego.pose.position(), cfg.ego.start_station, 30.0).map_or(0.0, |p| p.0);
        let mut estimate = self.ego.pose;
        let mut prev_macro: Option<MacroPath> = None;
        let mut prev_micro: Option<MotionPrimitive> = None;
        let mut stuck = 0u32;
        let mut contact = vec![false; self.npcs.len()];
        let mut npc_contact: BTreeMap<(usize, usize), bool> = BTreeMap::new();
        let mut passing: Vec<Option<f64>> = vec![None; self.npcs.len()];
        let mut min_clear = f64::INFINITY;
        let mut crossings: Vec<f64> = Vec::new();
        let mut completion = None;
        let mut speed_sum = 0.0;
        let mut min_speed = f64::INFINITY;

        for k in 0..=steps {
            let t = k as f64 * dt;
            // Perception and the planner's view of the ego.
            let agents = self.perceive();
            let est_station = self
                .project(&estimate.position(), s_ego, 15.0)
                .unwrap_or((s_ego, 0.0));
            let (s_plan, l_ego) = est_station;
            let ego_lane = nearest_index(&offsets, l_ego);
            let agent_frenet: Vec<(f64, f64, f64, f64)> = agents
                .iter()
                .filter_map(|a| {
                    self.project(&a.position, s_plan, 80.0)
                        .map(|(s, l)| (s, l, a.speed(), a.footprint.0))
                })
                .collect();

            // Next stop line and whether its signal holds us.
            let next_stop = self
                .stops
                .iter()
                .find(|(s, _)| *s > s_plan + self.ego.half_extents.0 - 0.5)
                .cloned();
            let mut signal_near: Option<SignalState> = None;
            let mut signal_stop = None;
            let mut turn = TurnScenario::Straight;
            if let Some((s_stop, name)) = &next_stop {
                if let Some(state) = signal_at(&self.schedules, name, t) {
                    let dist = s_stop - s_plan - self.ego.half_extents.0;
                    if must_stop(&state, self.ego.speed, dist) {
                        signal_stop = Some(*s_stop);
                    }
                    if s_stop - s_plan < SIGNAL_RANGE {
                        let (_, t0) = polyline_sample(&self.center, &self.center_cum, *s_stop);
                        let (_, t1) = polyline_sample(&self.center, &self.center_cum, s_stop + 30.0);
                        let turn_angle = normalize_angle(t1.y.atan2(t1.x) - t0.y.atan2(t0.x));
                        turn = if turn_angle > 0.5 {
                            TurnScenario::TurnLeft
                        } else if turn_angle < -0.5 {
                            TurnScenario::TurnRight
                        } else {
                            TurnScenario::Straight
                        };
                        signal_near = Some(state);
                    }
                }
            }

            // Planning window, predictions and obstacles.
            let first = ((s_plan / step).floor().max(0.0) as usize).min(n_layers.saturating_sub(2));
            let window = self.lattice.window(first, cfg.planner.window_layers);
            // Traffic entirely behind the ego yields to it and is left out.
            let relevant: Vec<AgentTrack> = agents
                .iter()
                .filter(|a| {
                    self.project(&a.position, s_plan, 80.0)
                        .is_none_or(|(s, _)| s + a.footprint.0 >= s_plan - self.ego.half_extents.0)
                })
                .cloned()
                .collect();
            let predicted = predict_agents(&relevant, &window, cfg.planner.horizon, cfg.planner.prediction_dt);
            let mut obstacles: Vec<Obstacle> = Vec::new();
            for a in &predicted {
                let pose = Pose2::new(a.position.x, a.position.y, a.heading);
                obstacles.extend(Obstacle::vehicle(&pose, 2.0 * a.footprint.0, 2.0 * a.footprint.1));
                for (p, v) in &a.predicted {
                    let heading = if v.norm() > 1e-6 { v.y.atan2(v.x) } else { a.heading };
                    obstacles.extend(Obstacle::vehicle(&Pose2::new(p.x, p.y, heading), 2.0 * a.footprint.0, 2.0 * a.footprint.1));
                }
            }
            let ahead = |lane: usize| -> Vec<&crate::roadgraph::LatticeVertex> {
                window
                    .layers
                    .iter()
                    .zip(&window.stations)
                    .filter(|(_, s)| **s >= s_plan - 0.5 * step)
                    .map(|(l, _)| &l[lane])
                    .collect()
            };
            let route_feasible = ahead(c_idx)
                .iter()
                .all(|v| v.drivable && min_clearance(&obstacles, &v.position()) >= clearance.c_min());
            // Keeping the lane is blocked only if the lane the ego is in is.
            let route_blocked = ahead(ego_lane)
                .iter()
                .any(|v| min_clearance(&obstacles, &v.position()) <= 0.0);
            let window_route = Route {
                start: String::new(),
                goal: String::new(),
                link_ids: Vec::new(),
                polyline: window.centerline(),
                total_cost: 0.0,
            };
            let macro_path = plan_macro(&window, &window_route, &obstacles, prev_macro.as_ref(), &cfg.planner.macro_weights).ok();
            let micro = macro_path.as_ref().and_then(|m| {
                let bs = BoundaryState::moving(estimate.position(), estimate.heading() * self.ego.speed);
                let speeds = [self.ego.speed.max(2.0), self.acc.v_limit];
                let prims = sample_primitive_set(&bs, m, MICRO_SPREAD, &speeds, cfg.planner.micro_lateral_count, cfg.planner.horizon);
                select_micro(&prims, &obstacles, prev_micro.as_ref(), &cfg.planner.micro_weights).ok()
            });
            let micro_target = micro.as_ref().and_then(|sel| {
                let end = *sel.primitive.samples.last().unwrap();
                frenet_project(&window_route.polyline, &end).ok().map(|f| f.lateral)
            });
            let target_lane_micro = micro_target.map(|l| nearest_index(&offsets, l));
            let side_occupied = match target_lane_micro {
                Some(tl) if tl != ego_lane => {
                    let shift = offsets[tl] - l_ego;
                    side_area_occupied(&estimate, shift, 3.5, DEFAULT_VEHICLE_LENGTH, &agents)
                }
                _ => false,
            };
            stuck = update_stuck_counter(stuck, self.ego.speed, signal_near.as_ref());
            let input = TspsInput {
                route_feasible,
                micro_feasible: micro.is_some(),
                stuck_counter: stuck,
                near_signal: signal_near.is_some(),
                signal: signal_near.clone(),
                turn_scenario: turn,
                side_area_occupied: side_occupied,
                ego_speed: self.ego.speed,
                route_blocked,
            };
            let decision = tsps_decide(&input, cfg.ego.stuck_threshold);

            // Path to track and the lane it leads to.
            let row = |k: usize| -> Vec<Vec2> { window.layers.iter().map(|l| l[k].position()).collect() };
            let (path, target_lane, micro_lateral) = match decision {
                PathDecision::GlobalRoute if route_feasible => (row(c_idx), c_idx, None),
                PathDecision::GlobalRoute | PathDecision::Halt => (row(ego_lane), ego_lane, None),
                PathDecision::EgoLane => (row(ego_lane), ego_lane, None),
                PathDecision::MicroPath => {
                    let sel = micro.as_ref().expect("micro path chosen only when feasible");
                    let mut pts = sel.primitive.samples.clone();
                    if let Some(m) = &macro_path {
                        let end = *pts.last().unwrap();
                        let s_end = frenet_project(&m.polyline, &end).map_or(f64::INFINITY, |f| f.station);
                        let cum = cumulative_lengths(&m.polyline);
                        pts.extend(m.polyline.iter().zip(&cum).filter(|(_, c)| **c > s_end + 1.0).map(|(p, _)| *p));
                    }
                    (pts, target_lane_micro.unwrap_or(ego_lane), micro_target)
                }
            };

            // Velocity: per-lane car following blended by lateral geometry.
            let v = self.ego.speed;
            let v_e = self.lane_speed(ego_lane, &agent_frenet, s_plan, v, signal_stop);
            let v_t = self.lane_speed(target_lane, &agent_frenet, s_plan, v, signal_stop);
            let mut v_ref = if decision == PathDecision::Halt {
                v_e.min(v)
            } else if target_lane == ego_lane {
                v_e
            } else {
                let lat_t = micro_lateral.unwrap_or(offsets[target_lane]);
                let d = |a: f64, b: f64| (a - b).abs();
                gvp_velocity(
                    v_t,
                    v_e,
                    d(lat_t, offsets[target_lane]),
                    d(lat_t, offsets[ego_lane]),
                    d(l_ego, offsets[target_lane]),
                    d(l_ego, offsets[ego_lane]),
                    cfg.tau,
                )
                .unwrap_or(v_e.min(v_t))
            };
            v_ref = v_ref.clamp(v - self.acc.max_decel * dt, v + self.acc.max_accel * dt).max(0.0);
            // Emergency hold for anything directly in the ego's swept path.
            let h = estimate.heading();
            for a in &agents {
                let rel = a.position - estimate.position();
                let along = rel.dot(&h);
                let across = rel.x * h.y - rel.y * h.x;
                if along > 0.0 && across.abs() < self.ego.half_extents.1 + a.footprint.1 + 0.3 {
                    let gap = along - self.ego.half_extents.0 - a.footprint.0;
                    let safe = acc_speed(gap, a.velocity.dot(&h).max(0.0), v, &AccConfig { dt, ..EMERGENCY });
                    v_ref = v_ref.min(safe);
                }
            }
            let accel = ((v_ref - v) / dt).clamp(-self.acc.max_decel, self.acc.max_accel);
            let lookahead = (cfg.ego.lookahead_min + cfg.ego.lookahead_gain * v).max(cfg.ego.lookahead_min);
            let est_state = VehicleState {
                pose: estimate,
                ..self.ego
            };
            let steer = match pure_pursuit_steer(&est_state, &path, lookahead) {
                Ok(s) => s,
                Err(_) => path.last().map_or(0.0, |last| {
                    let rel = last - estimate.position();
                    let alpha = normalize_angle(rel.y.atan2(rel.x) - estimate.theta);
                    if alpha.abs() < std::f64::consts::FRAC_PI_2 && rel.norm() > 1e-6 {
                        (2.0 * self.ego.wheelbase * alpha.sin() / rel.norm())
                            .atan()
                            .clamp(-self.ego.steer_max, self.ego.steer_max)
                    } else {
                        0.0
                    }
                }),
            };

            let truth_station = self.project(&self.ego.pose.position(), s_ego, 15.0).map_or(s_ego, |p| p.0);
            s_ego = truth_station;
            records.push(StepRecord {
                t,
                ego: self.ego.pose,
                speed: self.ego.speed,
                steer: self.ego.steer,
                decision,
                v_ref,
                v_target: v_t,
                v_ego_lane: v_e,
                stuck_counter: stuck,
                station: s_ego,
                estimate,
                agents: self.npcs.iter().map(Npc::pose).collect(),
            });
            speed_sum += self.ego.speed;
            min_speed = min_speed.min(self.ego.speed);
            let goal_reached = cfg.stop_at_goal && s_ego >= self.route_length - 2.0;
            if goal_reached && completion.is_none() {
                completion = Some(t);
            }
            if k == steps || goal_reached {
                break;
            }
            prev_macro = macro_path;
            prev_micro = micro.map(|m| m.primitive);

            // Advance the world.
            let before = self.ego;
            self.ego = step_vehicle(&self.ego, steer, accel, dt);
            self.step_npcs(t, &before);
            let s_new = self.project(&self.ego.pose.position(), s_ego, 15.0).map_or(s_ego, |p| p.0);

            // Events.
            let ego_box = self.ego.footprint();
            for (i, n) in self.npcs.iter().enumerate() {
                let pose = n.pose();
                let b = crate::geom::OrientedBox::new(pose.position(), pose.theta, n.half.0, n.half.1);
                let hit = ego_box.overlaps(&b);
                if hit && !contact[i] {
                    events.push(SimEvent {
                        t: t + dt,
                        kind: EventKind::Collision,
                        agent: i as u32 + 1,
                        detail: format!("ego and npc{}", i + 1),
                    });
                }
                contact[i] = hit;
                let ego_discs = Obstacle::vehicle(&self.ego.pose, DEFAULT_VEHICLE_LENGTH, DEFAULT_VEHICLE_WIDTH);
                for o in Obstacle::vehicle(&pose, 2.0 * n.half.0, 2.0 * n.half.1) {
                    for e in &ego_discs {
                        min_clear = min_clear.min(o.clearance(&Vec2::new(e.x, e.y)) - e.radius);
                    }
                }
                match self.project(&pose.position(), s_new, 30.0) {
                    Some((s_n, l_n)) if l_n.abs() <= 1.5 * 3.5 + 0.5 => {
                        let d = s_new - s_n;
                        if passing[i].is_some_and(|p| p < 0.0) && d >= 0.0 {
                            events.push(SimEvent {
                                t: t + dt,
                                kind: EventKind::Overtake,
                                agent: i as u32 + 1,
                                detail: format!("passed npc{} at station {:.1}", i + 1, s_new),
                            });
                        }
                        passing[i] = Some(d);
                    }
                    _ => passing[i] = None,
                }
            }
            for i in 0..self.npcs.len() {
                for j in i + 1..self.npcs.len() {
                    let (a, b) = (self.npcs[i].pose(), self.npcs[j].pose());
                    let ba = crate::geom::OrientedBox::new(a.position(), a.theta, self.npcs[i].half.0, self.npcs[i].half.1);
                    let bb = crate::geom::OrientedBox::new(b.position(), b.theta, self.npcs[j].half.0, self.npcs[j].half.1);
                    let hit = ba.overlaps(&bb);
                    let was = npc_contact.insert((i, j), hit).unwrap_or(false);
                    if hit && !was {
                        events.push(SimEvent {
                            t: t + dt,
                            kind: EventKind::Collision,
                            agent: i as u32 + 1,
                            detail: format!("npc{} and npc{}", i + 1, j + 1),
                        });
                    }
                }
            }
            for (s_stop, name) in &self.stops {
                if s_ego < *s_stop && s_new >= *s_stop {
                    let red = [t, t + dt]
                        .iter()
                        .any(|&tt| signal_at(&self.schedules, name, tt).is_some_and(|s| s.phase == SignalPhase::Red));
                    if red {
                        events.push(SimEvent {
                            t: t + dt,
                            kind: EventKind::SignalViolation,
                            agent: 0,
                            detail: format!("crossed `{name}` stop line on red"),
                        });
                    }
                }
            }
            while crossings.len() < self.lap_boundaries.len() && s_new >= self.lap_boundaries[crossings.len()] - 2.0 {
                crossings.push(t + dt);
            }
            s_ego = s_new;
            estimate = self.localize(t + dt, &before);
        }

        let mut lap_times = Vec::new();
        let mut last = 0.0;
        for c in &crossings {
            lap_times.push(c - last);
            last = *c;
        }
        let n_rec = records.len().max(1) as f64;
        let metrics = SimMetrics {
            progress: s_ego,
            route_length: self.route_length,
            min_clearance: min_clear,
            lap_times,
            completed: completion.is_some(),
            completion_time: completion,
            min_speed: if min_speed.is_finite() { min_speed } else { 0.0 },
            mean_speed: speed_sum / n_rec,
            overtakes: events.iter().filter(|e| e.kind == EventKind::Overtake).count(),
            collisions: events.iter().filter(|e| e.kind == EventKind::Collision).count(),
            violations: events.iter().filter(|e| e.kind == EventKind::SignalViolation).count(),
        };
        Ok(SimLog {
            dt,
            seed: cfg.seed,
            tau: cfg.tau,
            records,
            events,
            metrics,
        })
    }

    fn step_npcs(&mut self, t: f64, ego_before: &VehicleState) {
        let dt = self.cfg.dt;
        let poses: Vec<(Vec2, f64, f64)> = self
            .npcs
            .iter()
            .map(|n| (n.pose().position(), n.v, n.half.0))
            .chain(std::iter::once((ego_before.pose.position(), ego_before.speed, ego_before.half_extents.0)))
            .collect();
        let mut next = Vec::with_capacity(self.npcs.len());
        for (i, n) in self.npcs.iter().enumerate() {
            let desired = n.cfg.desired_speed(t);
            let acc = AccConfig {
                v_limit: desired,
                dt,
                ..self.acc
            };
            let mut gap = f64::INFINITY;
            let mut lead_v = 0.0;
            for (j, (p, v, half)) in poses.iter().enumerate() {
                if j == i {
                    continue;
                }
                if let Some(f) = frenet_project_near(&n.lane, &n.cum, p, n.s, 60.0) {
                    if f.lateral.abs() < 2.0 && f.station > n.s {
                        let g = f.station - n.s - n.half.0 - half;
                        if g < gap {
                            gap = g;
                            lead_v = *v;
                        }
                    }
                }
            }
            for (s_stop, name) in &n.stops {
                if *s_stop > n.s + n.half.0 - 0.5 {
                    if let Some(state) = signal_at(&self.schedules, name, t) {
                        let g = s_stop - n.s - n.half.0;
                        if must_stop(&state, n.v, g) && g < gap {
                            gap = g;
                            lead_v = 0.0;
                        }
                    }
                    break;
                }
            }
            let v = acc_speed(gap, lead_v, n.v, &acc);
            let s = (n.s + v * dt).min(n.end());
            next.push((s, if s >= n.end() { 0.0 } else { v }));
        }
        for (n, (s, v)) in self.npcs.iter_mut().zip(next) {
            n.s = s;
            n.v = v;
        }
    }

    /// Planner pose after the step: truth, or a registration estimate.
    fn localize(&mut self, t: f64, before: &VehicleState) -> Pose2 {
        let Some(loc) = self.localizer.as_mut() else {
            return self.ego.pose;
        };
        let setup = &self.cfg.localization;
        let inc = Transform2::from_pose(&before.pose)
            .inverse()
            .compose(&Transform2::from_pose(&self.ego.pose));
        let odom_pose = loc.noise.odometry(&inc);
        if loc.odom.push(t, odom_pose).is_err() {
            return loc.state.pose;
        }
        let truth = self.ego.pose;
        let pts = loc
            .world
            .sample(&mut loc.scan_rng, &truth.position(), setup.sensor_range, setup.scan_density);
        let scan = loc.noise.scan(&pts, &truth);
        let (state, _) = localization_step(&scan, t, &loc.odom, &loc.state, &loc.store, &setup.localizer, self.ego.speed);
        loc.state = state;
        loc.state.pose
    }
}

fn pc_span(offsets: &[f64]) -> f64 {
    offsets.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min).min(10.0)
}
