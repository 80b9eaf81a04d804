//! Fixed-step scenario simulation: kinematic vehicles, scripted traffic,
//! signal timing, noise, and a localization replay harness.

pub mod engine;
pub mod fixtures;
pub mod noise;
pub mod replay;
pub mod scenario;
pub mod signal;
pub mod vehicle;
pub mod world;

use thiserror::Error;

pub use engine::{run_scenario, EventKind, SimEvent, SimLog, SimMetrics, StepRecord};
pub use noise::{NoiseConfig, NoiseInjector, NoiseKind};
pub use replay::{run_replay, truth_along, ReplayConfig, ReplayReport, ReplayRow, ReplayScenario, ReplayWorld};
pub use scenario::{apply_override, EgoConfig, LocalizationSource, NpcConfig, PlannerConfig, ScenarioConfig};
pub use signal::{spat_feed, PhaseSpec, SignalSchedule};
pub use vehicle::{pure_pursuit_steer, step_vehicle, VehicleState};
pub use world::{World, WorldConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("map load failed: {0}")]
    MapLoadError(String),
    #[error("invalid config: {0}")]
    ConfigError(String),
    #[error("no path point lies a lookahead distance ahead")]
    PathExhausted,
}
