//! Localization replay: drive a known path through a generated world, feed
//! noisy odometry and scans to the localizer, and score it against truth.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{NoiseConfig, NoiseInjector};
use super::scenario::apply_override;
use super::world::{World, WorldConfig};
use super::SimError;
use crate::geom::{cumulative_lengths, polyline_sample, Pose2, Transform2, Vec2};
use crate::localization::{
    localization_step, localization_step_forced_failure, LocalizationMode, LocalizerConfig, LocalizerState,
    OdometryTrack, PoseLogRow,
};
use crate::pointcloud::{voxelize, Frame, MapStore, PointCloud};
use crate::roadgraph::{load_roadgraph, plan_route_via, NodeId, RoadGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub seed: u64,
    pub dt: f64,
    pub speed: f64,
    pub noise: NoiseConfig,
    pub localizer: LocalizerConfig,
    pub sensor_range: f64,
    pub scan_density: f64,
    pub map_density: f64,
    /// Steps (1-based) on which registration is disabled.
    pub forced_failures: BTreeSet<usize>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dt: 0.1,
            speed: 8.0,
            noise: NoiseConfig::default(),
            localizer: LocalizerConfig::default(),
            sensor_range: 40.0,
            scan_density: 4.0,
            map_density: 16.0,
            forced_failures: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayRow {
    pub t: f64,
    pub truth: Pose2,
    /// Dead reckoning from noisy odometry alone.
    pub odometry: Pose2,
    pub fused: Pose2,
    pub fitness: f64,
    pub failed: bool,
    pub forced: bool,
    /// True body-frame motion over the step.
    pub true_increment: Transform2,
    /// Odometry's estimate of the same motion.
    pub odom_increment: Transform2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub rows: Vec<ReplayRow>,
    pub mean_fused_error: f64,
    pub mean_odometry_error: f64,
    pub max_fused_error: f64,
    pub failures: usize,
}

impl ReplayReport {
    pub fn pose_log(&self) -> Vec<PoseLogRow> {
        self.rows
            .iter()
            .map(|r| PoseLogRow {
                t: r.t,
                pose: r.fused,
                mode: LocalizationMode::Navigation,
                fitness: r.fitness,
                failed: r.failed,
            })
            .collect()
    }

    pub fn errors_csv(&self) -> String {
        let mut out = String::from("t,truth_x,truth_y,fused_x,fused_y,odom_x,odom_y,fused_error,odom_error,failed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                r.truth.x,
                r.truth.y,
                r.fused.x,
                r.fused.y,
                r.odometry.x,
                r.odometry.y,
                r.truth.planar_distance(&r.fused),
                r.truth.planar_distance(&r.odometry),
                r.failed
            ));
        }
        out
    }
}

/// Prepared world and map for repeated replays.
#[derive(Debug, Clone)]
pub struct ReplayWorld {
    pub world: World,
    pub store: MapStore,
}

impl ReplayWorld {
    pub fn build(graph: &crate::roadgraph::RoadGraph, world_cfg: &WorldConfig, map_density: f64, voxel: f64) -> Result<Self, SimError> {
        let world = World::generate(graph, world_cfg);
        let cloud = PointCloud::new(world.map_points(world_cfg.seed ^ 0x5eed, map_density), Frame::Map);
        let grid = voxelize(&cloud, voxel).map_err(|e| SimError::MapLoadError(e.to_string()))?;
        Ok(Self {
            world,
            store: MapStore::new(grid, Pose2::default()),
        })
    }
}

/// Constant-speed truth poses along `path`, every `dt`, end inclusive.
pub fn truth_along(path: &[Vec2], speed: f64, dt: f64) -> Vec<Pose2> {
    let cum = cumulative_lengths(path);
    let total = *cum.last().unwrap_or(&0.0);
    let step = speed * dt;
    let n = if step > 0.0 { (total / step).floor() as usize } else { 0 };
    (0..=n)
        .map(|i| {
            let (p, t) = polyline_sample(path, &cum, i as f64 * step);
            Pose2::new(p.x, p.y, t.y.atan2(t.x))
        })
        .collect()
}

/// Replays `truth` (one pose per step) through the localizer.
pub fn run_replay(world: &ReplayWorld, truth: &[Pose2], cfg: &ReplayConfig) -> Result<ReplayReport, SimError> {
    if truth.len() < 2 {
        return Err(SimError::ConfigError("replay needs at least two poses".into()));
    }
    if !(cfg.dt > 0.0) {
        return Err(SimError::ConfigError(format!("`dt`: {} must be positive", cfg.dt)));
    }
    cfg.localizer
        .registration
        .validate()
        .map_err(|e| SimError::ConfigError(format!("`localizer`: {e}")))?;
    let mut noise = NoiseInjector::new(cfg.seed, cfg.noise, truth[0]);
    let mut scan_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    scan_rng.set_stream(4);
    let mut odom = OdometryTrack::default();
    odom.push(0.0, truth[0]).expect("empty track accepts a sample");
    let mut state = LocalizerState::new(0.0, truth[0]);
    let mut rows = Vec::with_capacity(truth.len() - 1);
    let mut odom_pose = truth[0];
    for k in 1..truth.len() {
        let t = k as f64 * cfg.dt;
        let true_inc = Transform2::from_pose(&truth[k - 1])
            .inverse()
            .compose(&Transform2::from_pose(&truth[k]));
        let prev_odom = odom_pose;
        odom_pose = noise.odometry(&true_inc);
        odom.push(t, odom_pose).expect("times increase");
        let forced = cfg.forced_failures.contains(&k);
        let (next, outcome) = if forced {
            localization_step_forced_failure(t, &odom, &state, &world.store, &cfg.localizer)
        } else {
            let pts = world
                .world
                .sample(&mut scan_rng, &truth[k].position(), cfg.sensor_range, cfg.scan_density);
            let scan = noise.scan(&pts, &truth[k]);
            localization_step(&scan, t, &odom, &state, &world.store, &cfg.localizer, cfg.speed)
        };
        state = next;
        rows.push(ReplayRow {
            t,
            truth: truth[k],
            odometry: odom_pose,
            fused: state.pose,
            fitness: outcome.result.fitness,
            failed: outcome.failed,
            forced,
            true_increment: true_inc,
            odom_increment: Transform2::from_pose(&prev_odom)
                .inverse()
                .compose(&Transform2::from_pose(&odom_pose)),
        });
    }
    let n = rows.len() as f64;
    let fused: Vec<f64> = rows.iter().map(|r| r.truth.planar_distance(&r.fused)).collect();
    let mean_fused_error = fused.iter().sum::<f64>() / n;
    let mean_odometry_error = rows.iter().map(|r| r.truth.planar_distance(&r.odometry)).sum::<f64>() / n;
    Ok(ReplayReport {
        max_fused_error: fused.iter().copied().fold(0.0, f64::max),
        failures: rows.iter().filter(|r| r.failed).count(),
        rows,
        mean_fused_error,
        mean_odometry_error,
    })
}

/// File form of a replay run: the course to drive plus replay settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayScenario {
    pub map: String,
    /// Waypoints of the driven route.
    pub route: Vec<NodeId>,
    pub seed: u64,
    pub dt: f64,
    pub speed: f64,
    pub noise: NoiseConfig,
    pub localizer: LocalizerConfig,
    pub sensor_range: f64,
    pub scan_density: f64,
    pub map_density: f64,
    /// Fraction of steps, drawn from the seed, with registration disabled.
    pub failure_rate: f64,
    pub world: WorldConfig,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ReplayScenario {
    fn default() -> Self {
        let r = ReplayConfig::default();
        Self {
            map: "builtin:loop".into(),
            route: vec!["r0".into(), "r60".into(), "r0".into()],
            seed: r.seed,
            dt: r.dt,
            speed: r.speed,
            noise: r.noise,
            localizer: r.localizer,
            sensor_range: r.sensor_range,
            scan_density: r.scan_density,
            map_density: r.map_density,
            failure_rate: 0.0,
            world: WorldConfig::default(),
            base_dir: None,
        }
    }
}

impl ReplayScenario {
    pub fn from_toml(text: &str, overrides: &[(String, String)], base_dir: Option<&Path>) -> Result<Self, SimError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| SimError::ConfigError(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: ReplayScenario = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| SimError::ConfigError(e.to_string()))?;
        cfg.base_dir = base_dir.map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides, path.parent())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |key: &str, why: String| Err(SimError::ConfigError(format!("`{key}`: {why}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", format!("{} must be positive", self.dt));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return bad("speed", format!("{} must be positive", self.speed));
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return bad("failure_rate", format!("{} outside [0, 1]", self.failure_rate));
        }
        if self.route.len() < 2 {
            return bad("route", "needs at least two waypoints".into());
        }
        if !(self.sensor_range > 0.0 && self.scan_density > 0.0 && self.map_density > 0.0) {
            return bad("sensor_range", "range and densities must be positive".into());
        }
        self.localizer
            .registration
            .validate()
            .map_err(|e| SimError::ConfigError(format!("`localizer`: {e}")))
    }

    pub fn load_map(&self) -> Result<RoadGraph, SimError> {
        if let Some(name) = self.map.strip_prefix("builtin:") {
            return super::fixtures::builtin_graph(name)
                .ok_or_else(|| SimError::MapLoadError(format!("unknown builtin map `{name}`")));
        }
        let path = match &self.base_dir {
            Some(dir) => dir.join(&self.map),
            None => PathBuf::from(&self.map),
        };
        load_roadgraph(&path).map_err(|e| SimError::MapLoadError(format!("{}: {e}", path.display())))
    }

    /// Replay settings for a run of `steps` steps (truth poses minus one).
    pub fn replay_config(&self, steps: usize) -> ReplayConfig {
        let count = ((self.failure_rate * steps as f64).round() as usize).min(steps);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(5);
        let forced_failures = sample(&mut rng, steps, count).into_iter().map(|i| i + 1).collect();
        ReplayConfig {
            seed: self.seed,
            dt: self.dt,
            speed: self.speed,
            noise: self.noise,
            localizer: self.localizer,
            sensor_range: self.sensor_range,
            scan_density: self.scan_density,
            map_density: self.map_density,
            forced_failures,
        }
    }

    /// Builds the world, drives the route and replays it.
    pub fn run(&self) -> Result<ReplayReport, SimError> {
        let graph = self.load_map()?;
        let route = plan_route_via(&graph, &self.route).map_err(|e| SimError::ConfigError(format!("`route`: {e}")))?;
        let truth = truth_along(&route.polyline, self.speed, self.dt);
        if truth.len() < 2 {
            return Err(SimError::ConfigError("`route`: shorter than one step".into()));
        }
        let world = ReplayWorld::build(
            &graph,
            &WorldConfig {
                seed: self.seed,
                ..self.world
            },
            self.map_density,
            self.localizer.voxel_size,
        )?;
        run_replay(&world, &truth, &self.replay_config(truth.len() - 1))
    }
}
