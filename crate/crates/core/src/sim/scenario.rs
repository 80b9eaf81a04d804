use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::noise::NoiseConfig;
use super::signal::SignalSchedule;
use super::SimError;
use crate::behavior::{AccConfig, DEFAULT_STUCK_THRESHOLD};
use crate::localization::LocalizerConfig;
use crate::motion::{MacroWeights, MicroWeights};
use crate::roadgraph::{load_roadgraph, LinkId, NodeId, RoadGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpcConfig {
    /// Lane link the vehicle spawns on; it follows first successors from there.
    pub link: LinkId,
    /// Distance from the start of `link`.
    #[serde(default)]
    pub station: f64,
    pub speed: f64,
    /// `[t, speed]` steps overriding `speed` from time `t` on.
    #[serde(default)]
    pub profile: Vec<[f64; 2]>,
}

impl NpcConfig {
    pub fn desired_speed(&self, t: f64) -> f64 {
        self.profile
            .iter()
            .rfind(|p| p[0] <= t)
            .map_or(self.speed, |p| p[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoConfig {
    pub start_speed: f64,
    /// Distance along the route where the ego starts.
    pub start_station: f64,
    pub acc: AccConfig,
    pub stuck_threshold: u32,
    pub lookahead_min: f64,
    pub lookahead_gain: f64,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            start_speed: 0.0,
            start_station: 0.0,
            acc: AccConfig::default(),
            stuck_threshold: DEFAULT_STUCK_THRESHOLD,
            lookahead_min: 4.0,
            lookahead_gain: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub station_step: f64,
    pub lateral_offsets: Vec<f64>,
    /// Lattice layers planned over each cycle, starting just behind the ego.
    pub window_layers: usize,
    pub horizon: f64,
    pub prediction_dt: f64,
    pub micro_lateral_count: usize,
    pub macro_weights: MacroWeights,
    pub micro_weights: MicroWeights,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            station_step: 5.0,
            lateral_offsets: vec![-3.5, 0.0, 3.5],
            window_layers: 14,
            horizon: 4.0,
            prediction_dt: 0.5,
            micro_lateral_count: 7,
            macro_weights: MacroWeights::default(),
            micro_weights: MicroWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationSource {
    /// The planner sees the true ego pose.
    #[default]
    Truth,
    /// The planner sees the output of scan registration against a map of a
    /// generated world.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationSetup {
    pub mode: LocalizationSource,
    pub noise: NoiseConfig,
    pub localizer: LocalizerConfig,
    pub sensor_range: f64,
    pub scan_density: f64,
    pub map_density: f64,
}

impl Default for LocalizationSetup {
    fn default() -> Self {
        Self {
            mode: LocalizationSource::Truth,
            noise: NoiseConfig::default(),
            localizer: LocalizerConfig::default(),
            sensor_range: 40.0,
            scan_density: 4.0,
            map_density: 16.0,
        }
    }
}

fn default_tau() -> f64 {
    0.75
}

fn default_dt() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_perception_sigma() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Road-graph JSON path (relative to the config file) or `builtin:<name>`.
    pub map: String,
    pub start: NodeId,
    pub goal: NodeId,
    /// Intermediate waypoints between start and goal.
    #[serde(default)]
    pub via: Vec<NodeId>,
    #[serde(default)]
    pub npcs: Vec<NpcConfig>,
    #[serde(default)]
    pub signals: Vec<SignalSchedule>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_true")]
    pub stop_at_goal: bool,
    /// Standard deviation of perceived agent positions.
    #[serde(default = "default_perception_sigma")]
    pub perception_sigma: f64,
    #[serde(default)]
    pub ego: EgoConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub localization: LocalizationSetup,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Sets `key` (dotted path) in a parsed TOML document; `raw` is read as a
/// TOML value, or as a plain string when it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<(), SimError> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(SimError::ConfigError(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| SimError::ConfigError(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ScenarioConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[(String, String)], base_dir: Option<&Path>) -> Result<Self, SimError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| SimError::ConfigError(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: ScenarioConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| SimError::ConfigError(e.to_string()))?;
        cfg.base_dir = base_dir.map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |key: &str, why: String| Err(SimError::ConfigError(format!("`{key}`: {why}")));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt", format!("{} must be positive", self.dt));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad("duration", format!("{} must be positive", self.duration));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return bad("duration", format!("{} is not a multiple of dt {}", self.duration, self.dt));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", format!("{} outside [0, 1]", self.tau));
        }
        if !(self.perception_sigma >= 0.0) {
            return bad("perception_sigma", "must be non-negative".into());
        }
        for (i, n) in self.npcs.iter().enumerate() {
            if !(n.speed >= 0.0) || n.profile.iter().any(|p| !(p[1] >= 0.0) || !p[0].is_finite()) {
                return bad(&format!("npcs[{i}]"), "speeds must be non-negative".into());
            }
        }
        for s in &self.signals {
            s.validate().map_err(SimError::ConfigError)?;
        }
        let p = &self.planner;
        if !(p.station_step > 0.0) || p.window_layers < 2 || !(p.horizon > 0.0) || !(p.prediction_dt > 0.0) {
            return bad("planner", "step, horizon and prediction_dt must be positive, window_layers ≥ 2".into());
        }
        if p.micro_lateral_count == 0 {
            return bad("planner.micro_lateral_count", "must be at least 1".into());
        }
        p.macro_weights
            .validate()
            .map_err(|e| SimError::ConfigError(format!("`planner.macro_weights`: {e}")))?;
        if !(self.ego.acc.v_limit > 0.0) || !(self.ego.acc.max_decel > 0.0) || !(self.ego.acc.max_accel > 0.0) {
            return bad("ego.acc", "limits must be positive".into());
        }
        if self.localization.mode == LocalizationSource::Replay {
            self.localization
                .localizer
                .registration
                .validate()
                .map_err(|e| SimError::ConfigError(format!("`localization.localizer`: {e}")))?;
        }
        Ok(())
    }

    /// Loads the road graph named by `map`.
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

    pub fn waypoints(&self) -> Vec<NodeId> {
        let mut w = vec![self.start.clone()];
        w.extend(self.via.iter().cloned());
        w.push(self.goal.clone());
        w
    }
}
