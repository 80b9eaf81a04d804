//! Map-relative pose estimation: voxel Gaussian registration over SE(2),
//! odometry-predicted initial guesses, failure detection and the
//! navigation / lane-follow / stop resilience modes.

use std::fmt::{self, Write as _};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2, Transform2};
use crate::parallel::ordered_map;
use crate::pointcloud::{sliding_window, voxelize, window_radius, MapStore, PointCloud, VoxelCell, VoxelGaussianGrid};
use crate::roadgraph::{nearest_link, RoadGraph};

const MAX_HALVINGS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizationError {
    #[error("no source cell has a target cell within {0} m")]
    NoCorrespondences(f64),
    #[error("odometry track needs at least two samples, has {0}")]
    InsufficientHistory(usize),
    #[error("odometry timestamps must strictly increase (sample {0})")]
    NonMonotonic(usize),
    #[error("invalid registration input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub max_iterations: usize,
    pub epsilon_corres: f64,
    pub max_corresponding_distance: f64,
    pub matching_error_threshold: f64,
    pub worker_count: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 64,
            epsilon_corres: 0.03,
            max_corresponding_distance: 3.0,
            matching_error_threshold: 0.5,
            worker_count: 6,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        let ok = self.max_iterations > 0
            && self.epsilon_corres > 0.0
            && self.max_corresponding_distance > 0.0
            && self.matching_error_threshold > 0.0
            && self.worker_count > 0
            && self.max_corresponding_distance >= self.epsilon_corres;
        if ok {
            Ok(())
        } else {
            Err(LocalizationError::InvalidInput(format!("{self:?}")))
        }
    }

    /// Largest correction the solver can make in one scan, `n_max * eps`.
    pub fn reachable_correction(&self) -> f64 {
        self.max_iterations as f64 * self.epsilon_corres
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegistrationResult {
    pub transform: Transform2,
    /// Mean squared distance between corresponding cell means.
    pub fitness: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub correspondences: usize,
}

struct Term {
    h: Matrix3<f64>,
    g: Vector3<f64>,
    cost: f64,
}

fn rotation3(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn apply(x: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    rotation3(x[2]) * p + Vector3::new(x[0], x[1], 0.0)
}

fn correspond<'a>(
    src: &VoxelCell,
    target: &'a VoxelGaussianGrid,
    x: &Vector3<f64>,
    max_distance: f64,
) -> Option<&'a VoxelCell> {
    let p = apply(x, &src.mean);
    let c = target.index_of(&p);
    let mut best: Option<(f64, &VoxelCell)> = None;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                if let Some(cell) = target.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                    let d = (cell.mean - p).norm();
                    if d <= max_distance && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, cell));
                    }
                }
            }
        }
    }
    best.map(|(_, cell)| cell)
}

fn term(src: &VoxelCell, tgt: &VoxelCell, x: &Vector3<f64>, with_derivatives: bool) -> Term {
    let r = rotation3(x[2]);
    let z = src.mean;
    let d = tgt.mean - (r * z + Vector3::new(x[0], x[1], 0.0));
    let combined = tgt.covariance + r * src.covariance * r.transpose();
    let omega = combined.try_inverse().unwrap_or_else(Matrix3::identity);
    let cost = d.dot(&(omega * d));
    if !with_derivatives {
        return Term {
            h: Matrix3::zeros(),
            g: Vector3::zeros(),
            cost,
        };
    }
    let (s, c) = x[2].sin_cos();
    let jp = Matrix3::new(
        1.0,
        0.0,
        -s * z.x - c * z.y,
        0.0,
        1.0,
        c * z.x - s * z.y,
        0.0,
        0.0,
        0.0,
    );
    let jt_omega = jp.transpose() * omega;
    Term {
        h: jt_omega * jp,
        g: jt_omega * d,
        cost,
    }
}

fn pairs<'a>(
    sources: &[&'a VoxelCell],
    target: &'a VoxelGaussianGrid,
    x: &Vector3<f64>,
    cfg: &RegistrationConfig,
) -> Vec<(&'a VoxelCell, &'a VoxelCell)> {
    let found = ordered_map(sources, cfg.worker_count, |s| correspond(s, target, x, cfg.max_corresponding_distance));
    sources
        .iter()
        .zip(found)
        .filter_map(|(s, t)| t.map(|t| (*s, t)))
        .collect()
}

fn total_cost(pairs: &[(&VoxelCell, &VoxelCell)], x: &Vector3<f64>, workers: usize) -> f64 {
    ordered_map(pairs, workers, |(s, t)| term(s, t, x, false).cost)
        .into_iter()
        .fold(0.0, |a, c| a + c)
}

fn fitness(pairs: &[(&VoxelCell, &VoxelCell)], x: &Vector3<f64>) -> f64 {
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    let sum = pairs
        .iter()
        .fold(0.0, |a, (s, t)| a + (t.mean - apply(x, &s.mean)).norm_squared());
    sum / pairs.len() as f64
}

/// Aligns `source` onto `target` by Gauss-Newton on the summed Mahalanobis
/// residual of corresponding voxel Gaussians.
pub fn register(
    source: &VoxelGaussianGrid,
    target: &VoxelGaussianGrid,
    initial_guess: &Transform2,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, LocalizationError> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(LocalizationError::InvalidInput("empty grid".into()));
    }
    if !initial_guess.is_finite() {
        return Err(LocalizationError::InvalidInput("non-finite initial guess".into()));
    }
    let sources: Vec<&VoxelCell> = source.cells.values().collect();
    let mut x = Vector3::new(
        initial_guess.translation.x,
        initial_guess.translation.y,
        initial_guess.rotation,
    );
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..cfg.max_iterations {
        let current = pairs(&sources, target, &x, cfg);
        if current.is_empty() {
            if iter == 0 {
                return Err(LocalizationError::NoCorrespondences(cfg.max_corresponding_distance));
            }
            break;
        }
        iterations = iter + 1;
        let terms = ordered_map(&current, cfg.worker_count, |(s, t)| term(s, t, &x, true));
        let (h, g, cost) = terms.iter().fold(
            (Matrix3::zeros(), Vector3::zeros(), 0.0),
            |(h, g, c), t| (h + t.h, g + t.g, c + t.cost),
        );
        let Some(delta) = h.cholesky().map(|ch| ch.solve(&g)) else {
            break;
        };
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = x + step;
            if total_cost(&current, &candidate, cfg.worker_count) <= cost {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(next) => {
                let moved = (next - x).norm();
                x = next;
                if moved < cfg.epsilon_corres {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = delta.norm() < cfg.epsilon_corres;
                break;
            }
        }
    }
    let final_pairs = pairs(&sources, target, &x, cfg);
    Ok(RegistrationResult {
        transform: Transform2::new(x[0], x[1], x[2]),
        fitness: fitness(&final_pairs, &x),
        iterations_used: iterations,
        converged,
        correspondences: final_pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometrySample {
    pub t: f64,
    pub pose: Pose2,
}

/// Time-ordered relative poses in the odometry frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OdometryTrack {
    samples: Vec<OdometrySample>,
}

impl OdometryTrack {
    pub fn new(samples: Vec<OdometrySample>) -> Result<Self, LocalizationError> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(LocalizationError::NonMonotonic(i + 1));
            }
        }
        Ok(Self { samples })
    }

    pub fn push(&mut self, t: f64, pose: Pose2) -> Result<(), LocalizationError> {
        if self.samples.last().is_some_and(|s| !(t > s.t)) {
            return Err(LocalizationError::NonMonotonic(self.samples.len()));
        }
        self.samples.push(OdometrySample { t, pose });
        Ok(())
    }

    pub fn samples(&self) -> &[OdometrySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pose at `t`, interpolated within a sample interval or extrapolated
    /// from the nearest one.
    pub fn pose_at(&self, t: f64) -> Result<Transform2, LocalizationError> {
        let n = self.samples.len();
        if n < 2 {
            return Err(LocalizationError::InsufficientHistory(n));
        }
        let k = self.samples.partition_point(|s| s.t <= t);
        let (a, b, base) = match k {
            0 => (0, 1, 0),
            k if k >= n => (n - 2, n - 1, n - 1),
            k => (k - 1, k, k - 1),
        };
        let (sa, sb) = (&self.samples[a], &self.samples[b]);
        let ta = Transform2::from_pose(&sa.pose);
        let tb = Transform2::from_pose(&sb.pose);
        let rel = ta.inverse().compose(&tb);
        let f = (t - self.samples[base].t) / (sb.t - sa.t);
        let scaled = Transform2::new(f * rel.translation.x, f * rel.translation.y, f * rel.rotation);
        Ok(Transform2::from_pose(&self.samples[base].pose).compose(&scaled))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,theta\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{},{}", s.t, s.pose.x, s.pose.y, s.pose.theta);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, LocalizationError> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('t')) {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| LocalizationError::InvalidInput(format!("row {}: {e}", i + 1)))?;
            if v.len() != 4 {
                return Err(LocalizationError::InvalidInput(format!("row {}: expected 4 fields", i + 1)));
            }
            samples.push(OdometrySample {
                t: v[0],
                pose: Pose2::new(v[1], v[2], v[3]),
            });
        }
        Self::new(samples)
    }
}

/// Body-frame motion between `t` and `t + dt` according to odometry.
pub fn predict_from_odometry(track: &OdometryTrack, t: f64, dt: f64) -> Result<Transform2, LocalizationError> {
    let a = track.pose_at(t)?;
    let b = track.pose_at(t + dt)?;
    Ok(a.inverse().compose(&b))
}

/// Flags a registration whose correction exceeds the solver's reach, whose
/// fitness is too poor, or that did not converge.
pub fn detect_failure(
    result: &RegistrationResult,
    prev_pose: &Pose2,
    new_pose: &Pose2,
    cfg: &RegistrationConfig,
    fitness_threshold: f64,
) -> bool {
    cfg.reachable_correction() < new_pose.planar_distance(prev_pose)
        || result.fitness > fitness_threshold
        || !result.converged
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LocalizationMode {
    Navigation,
    LaneFollow,
    Stop,
}

impl fmt::Display for LocalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Navigation => "navigation",
            Self::LaneFollow => "lane_follow",
            Self::Stop => "stop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalizerState {
    pub stamp: f64,
    pub pose: Pose2,
    pub last_transform: Transform2,
    pub mode: LocalizationMode,
    pub consecutive_failures: usize,
}

impl LocalizerState {
    pub fn new(stamp: f64, pose: Pose2) -> Self {
        Self {
            stamp,
            pose,
            last_transform: Transform2::from_pose(&pose),
            mode: LocalizationMode::Navigation,
            consecutive_failures: 0,
        }
    }
}

/// Tuning for one pipeline step beyond the solver itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    pub registration: RegistrationConfig,
    pub voxel_size: f64,
    pub window_base: f64,
    pub window_gain: f64,
    pub fitness_threshold: f64,
    pub max_lateral: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        let registration = RegistrationConfig::default();
        Self {
            registration,
            voxel_size: 1.0,
            window_base: 70.0,
            window_gain: 1.8,
            fitness_threshold: registration.matching_error_threshold,
            max_lateral: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepOutcome {
    pub result: RegistrationResult,
    pub failed: bool,
    pub increment: Transform2,
}

/// One localization cycle at time `t`; never aborts.
pub fn localization_step(
    scan: &PointCloud,
    t: f64,
    odom: &OdometryTrack,
    state: &LocalizerState,
    store: &MapStore,
    cfg: &LocalizerConfig,
    speed: f64,
) -> (LocalizerState, StepOutcome) {
    step_impl(scan, t, odom, state, store, cfg, speed, false)
}

/// As [`localization_step`] with registration disabled, for fallback tests.
pub fn localization_step_forced_failure(
    t: f64,
    odom: &OdometryTrack,
    state: &LocalizerState,
    store: &MapStore,
    cfg: &LocalizerConfig,
) -> (LocalizerState, StepOutcome) {
    let empty = PointCloud::new(Vec::new(), crate::pointcloud::Frame::Body);
    step_impl(&empty, t, odom, state, store, cfg, 0.0, true)
}

#[allow(clippy::too_many_arguments)]
fn step_impl(
    scan: &PointCloud,
    t: f64,
    odom: &OdometryTrack,
    state: &LocalizerState,
    store: &MapStore,
    cfg: &LocalizerConfig,
    speed: f64,
    force_failure: bool,
) -> (LocalizerState, StepOutcome) {
    let increment = predict_from_odometry(odom, state.stamp, t - state.stamp).unwrap_or_else(|_| Transform2::identity());
    let guess = state.last_transform.compose(&increment);
    let predicted = Transform2::from_pose(&state.pose).compose(&increment);
    let attempt = if force_failure {
        None
    } else {
        voxelize(scan, cfg.voxel_size).ok().and_then(|source| {
            let radius = window_radius(speed, cfg.window_base, cfg.window_gain);
            let window = sliding_window(store, &predicted.to_pose(), radius);
            if window.is_empty() {
                return None;
            }
            register(&source, &window, &guess, &cfg.registration).ok()
        })
    };
    let result = attempt.unwrap_or(RegistrationResult {
        transform: guess,
        fitness: f64::INFINITY,
        iterations_used: 0,
        converged: false,
        correspondences: 0,
    });
    let candidate = result.transform.to_pose();
    let failed = attempt.is_none()
        || !candidate.is_finite()
        || detect_failure(&result, &state.pose, &candidate, &cfg.registration, cfg.fitness_threshold);
    let mut next = *state;
    next.stamp = t;
    if failed {
        next.pose = predicted.to_pose();
        next.last_transform = predicted;
        next.consecutive_failures += 1;
    } else {
        next.pose = candidate;
        next.last_transform = result.transform;
        next.consecutive_failures = 0;
    }
    (
        next,
        StepOutcome {
            result,
            failed,
            increment,
        },
    )
}

/// Whether `pose` keeps within `max_lateral` of the nearest lane centerline.
pub fn health_check(pose: &Pose2, road_map: &RoadGraph, max_lateral: f64) -> bool {
    nearest_link(road_map, pose).is_some_and(|n| n.lateral.abs() <= max_lateral)
}

/// Next control mode. Stop is absorbing; only [`reinitialize`] leaves it.
pub fn resilience_transition(state: &LocalizerState, healthy: bool, scan_ok: bool, lane_follow_ok: bool) -> LocalizationMode {
    use LocalizationMode::*;
    match state.mode {
        Stop => Stop,
        LaneFollow if scan_ok && healthy && state.consecutive_failures == 0 => Navigation,
        Navigation if scan_ok && healthy => Navigation,
        _ if lane_follow_ok => LaneFollow,
        _ => Stop,
    }
}

/// Re-seeds the localizer at a known pose and resumes navigation.
pub fn reinitialize(state: &LocalizerState, pose: Pose2) -> LocalizerState {
    LocalizerState {
        stamp: state.stamp,
        pose,
        last_transform: Transform2::from_pose(&pose),
        mode: LocalizationMode::Navigation,
        consecutive_failures: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseLogRow {
    pub t: f64,
    pub pose: Pose2,
    pub mode: LocalizationMode,
    pub fitness: f64,
    pub failed: bool,
}

pub fn pose_log_csv(rows: &[PoseLogRow]) -> String {
    let mut out = String::from("t,x,y,theta,mode,fitness,failed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t, r.pose.x, r.pose.y, r.pose.theta, r.mode, r.fitness, r.failed
        );
    }
    out
}
