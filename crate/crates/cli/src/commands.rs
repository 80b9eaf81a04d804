use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use uak_core::analysis::{pairwise_report_with_workers, read_trajectories_csv, SectionFile, TrajectorySet};
use uak_core::localization::pose_log_csv;
use uak_core::roadgraph::{load_roadgraph, plan_route_via, RoadGraph};
use uak_core::sim::fixtures::builtin_graph;
use uak_core::sim::{run_scenario, EventKind, ReplayScenario, ScenarioConfig, SimError};

use crate::svg::{document, Panel, Series};
use crate::{Command, Common, EXIT_EVENT, EXIT_IO, EXIT_USAGE};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Io(_) => EXIT_IO,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Io(m) => f.write_str(m),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self::Usage(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;
type Curve = Vec<(f64, f64)>;

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::SimRun {
            config,
            common,
            seed,
            team,
            tau_sweep,
        } => sim_run(&config, &common, seed, team, &tau_sweep),
        Command::LocalizeReplay {
            config,
            common,
            seed,
            workers,
        } => localize_replay(config.as_deref(), &common, seed, workers),
        Command::PlanRoute {
            config,
            common,
            map,
            start,
            goal,
            via,
        } => plan_route(config.as_deref(), &common, map, start, goal, via),
        Command::Analyze {
            logs,
            out,
            sections,
            k,
            min_samples,
            workers,
        } => analyze(&logs, &out, sections.as_deref(), k, min_samples, workers),
        Command::Plot { input, out, map, config } => plot(&input, &out, map, config.as_deref()),
    }
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn load_map(spec: &str, base: Option<&Path>) -> Result<RoadGraph> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin_graph(name).ok_or_else(|| CliError::Usage(format!("unknown builtin map `{name}`")));
    }
    let path = base.map_or_else(|| PathBuf::from(spec), |b| b.join(spec));
    load_roadgraph(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct SweepRow {
    tau: f64,
    progress: f64,
    min_speed: f64,
    mean_speed: f64,
    overtakes: usize,
    collisions: usize,
    violations: usize,
    completed: bool,
}

fn sim_run(config: &Path, common: &Common, seed: Option<u64>, team: Option<String>, sweep: &[f64]) -> Result<u8> {
    let mut ov = overrides(&common.set)?;
    if let Some(s) = seed {
        ov.push(("seed".into(), s.to_string()));
    }
    let cfg = ScenarioConfig::load(config, &ov)?;
    if !sweep.is_empty() {
        let mut csv = String::from("tau,t,station,speed\n");
        let mut rows = Vec::new();
        for &tau in sweep {
            if !(0.0..=1.0).contains(&tau) {
                return Err(CliError::Usage(format!("--tau-sweep: {tau} outside [0, 1]")));
            }
            let log = run_scenario(&ScenarioConfig { tau, ..cfg.clone() })?;
            for r in &log.records {
                let _ = writeln!(csv, "{tau},{},{},{}", r.t, r.station, r.speed);
            }
            let m = &log.metrics;
            info!("tau {tau}: progress {:.2} m, min speed {:.2} m/s", m.progress, m.min_speed);
            rows.push(SweepRow {
                tau,
                progress: m.progress,
                min_speed: m.min_speed,
                mean_speed: m.mean_speed,
                overtakes: m.overtakes,
                collisions: m.collisions,
                violations: m.violations,
                completed: m.completed,
            });
        }
        write_out(&common.out, "sweep.csv", &csv)?;
        write_out(&common.out, "sweep.json", &to_json(&rows))?;
        return Ok(if rows.iter().any(|r| r.collisions > 0) { EXIT_EVENT } else { 0 });
    }
    let log = run_scenario(&cfg)?;
    let team = team.unwrap_or_else(|| {
        config
            .file_stem()
            .map_or("ego".to_string(), |s| s.to_string_lossy().into_owned())
    });
    write_out(&common.out, "log.csv", &log.to_csv())?;
    write_out(&common.out, "events.json", &(log.events_json() + "\n"))?;
    write_out(&common.out, "metrics.json", &(log.metrics_json() + "\n"))?;
    write_out(&common.out, "decisions.csv", &log.decisions_csv())?;
    write_out(&common.out, "trajectory.csv", &log.trajectory_csv(&team))?;
    write_out(&common.out, "scenario.toml", &cfg.to_toml())?;
    let m = &log.metrics;
    info!(
        "progress {:.2}/{:.2} m, {} overtakes, {} collisions, {} violations",
        m.progress, m.route_length, m.overtakes, m.collisions, m.violations
    );
    let collisions = log.count(EventKind::Collision);
    if collisions > 0 {
        eprintln!("{collisions} collision event(s) recorded");
        return Ok(EXIT_EVENT);
    }
    Ok(0)
}

#[derive(Serialize)]
struct ReplaySummary {
    steps: usize,
    forced_failures: usize,
    failures: usize,
    mean_fused_error: f64,
    max_fused_error: f64,
    mean_odometry_error: f64,
}

fn localize_replay(config: Option<&Path>, common: &Common, seed: Option<u64>, workers: Option<usize>) -> Result<u8> {
    let mut ov = overrides(&common.set)?;
    if let Some(s) = seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if let Some(w) = workers {
        ov.push(("localizer.registration.worker_count".into(), w.to_string()));
    }
    let sc = match config {
        Some(p) => ReplayScenario::load(p, &ov)?,
        None => ReplayScenario::from_toml("", &ov, None)?,
    };
    let report = sc.run()?;
    write_out(&common.out, "pose_log.csv", &pose_log_csv(&report.pose_log()))?;
    write_out(&common.out, "errors.csv", &report.errors_csv())?;
    let summary = ReplaySummary {
        steps: report.rows.len(),
        forced_failures: report.rows.iter().filter(|r| r.forced).count(),
        failures: report.failures,
        mean_fused_error: report.mean_fused_error,
        max_fused_error: report.max_fused_error,
        mean_odometry_error: report.mean_odometry_error,
    };
    write_out(&common.out, "summary.json", &to_json(&summary))?;
    info!(
        "mean fused error {:.4} m, odometry {:.4} m",
        summary.mean_fused_error, summary.mean_odometry_error
    );
    Ok(0)
}

#[derive(Serialize)]
struct RouteSummary<'a> {
    waypoints: &'a [String],
    link_ids: &'a [String],
    length: f64,
    total_cost: f64,
}

fn plan_route(
    config: Option<&Path>,
    common: &Common,
    map: Option<String>,
    start: Option<String>,
    goal: Option<String>,
    via: Vec<String>,
) -> Result<u8> {
    let ov = overrides(&common.set)?;
    let (mut map_spec, mut base, mut s, mut g, mut v) = (None, None, None, None, Vec::new());
    if let Some(p) = config {
        let cfg = ScenarioConfig::load(p, &ov)?;
        map_spec = Some(cfg.map.clone());
        base = cfg.base_dir.clone();
        s = Some(cfg.start.clone());
        g = Some(cfg.goal.clone());
        v = cfg.via.clone();
    } else if !ov.is_empty() {
        return Err(CliError::Usage("--set needs --config".into()));
    }
    if map.is_some() {
        base = None;
    }
    let map_spec = map.or(map_spec).ok_or_else(|| CliError::Usage("--map or --config is required".into()))?;
    let start = start.or(s).ok_or_else(|| CliError::Usage("--start or --config is required".into()))?;
    let goal = goal.or(g).ok_or_else(|| CliError::Usage("--goal or --config is required".into()))?;
    if !via.is_empty() {
        v = via;
    }
    let graph = load_map(&map_spec, base.as_deref())?;
    let mut waypoints = vec![start];
    waypoints.extend(v);
    waypoints.push(goal);
    let route = plan_route_via(&graph, &waypoints).map_err(|e| CliError::Usage(format!("route: {e}")))?;
    let summary = RouteSummary {
        waypoints: &waypoints,
        link_ids: &route.link_ids,
        length: route.length(),
        total_cost: route.total_cost,
    };
    write_out(&common.out, "route.json", &to_json(&summary))?;
    write_out(&common.out, "route.csv", &route.to_csv())?;
    info!("{} links, {:.2} m", route.link_ids.len(), summary.length);
    Ok(0)
}

fn analyze(
    logs: &[PathBuf],
    out: &Path,
    sections: Option<&Path>,
    k: usize,
    min_samples: usize,
    workers: Option<usize>,
) -> Result<u8> {
    let mut sets: Vec<TrajectorySet> = Vec::new();
    for path in logs {
        let text = read_input(path)?;
        let parsed = read_trajectories_csv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if parsed.is_empty() {
            return Err(CliError::Usage(format!("{}: no trajectory rows", path.display())));
        }
        let stem = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
        for mut set in parsed {
            if sets.iter().any(|s| s.team == set.team) {
                set.team = format!("{stem}:{}", set.team);
            }
            if sets.iter().any(|s| s.team == set.team) {
                return Err(CliError::Usage(format!("{}: team `{}` appears twice", path.display(), set.team)));
            }
            sets.push(set);
        }
    }
    if sets.len() < 2 {
        return Err(CliError::Usage(format!("need trajectories from at least 2 teams, got {}", sets.len())));
    }
    let specs = match sections {
        Some(p) => {
            SectionFile::from_toml(&read_input(p)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
                .sections
        }
        None => Vec::new(),
    };
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |w| w.get()));
    let report = pairwise_report_with_workers(&sets, &specs, k, min_samples, workers)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    write_out(out, "report.json", &(report.to_json() + "\n"))?;
    write_out(out, "report.txt", &report.to_text())?;
    info!("{} teams, {} pairs", report.teams.len(), report.pairs.len());
    Ok(0)
}

/// Header and rows of a CSV file, with numeric columns looked up by name.
struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn parse(text: &str, name: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r
            .headers()
            .map_err(|e| CliError::Usage(format!("{name}: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
        Ok(Self { headers, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let rec = &self.rows[row];
        rec.get(col)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| {
                let line = rec.position().map_or(0, |p| p.line());
                CliError::Usage(format!("line {line}: column `{}` is not a number", self.headers[col]))
            })
    }

    fn xy(&self, x: usize, y: usize) -> Result<Vec<(f64, f64)>> {
        (0..self.rows.len()).map(|i| Ok((self.num(i, x)?, self.num(i, y)?))).collect()
    }
}

fn outline(graph: &RoadGraph) -> Vec<Series> {
    if graph.lanes.is_empty() {
        return graph
            .links
            .keys()
            .map(|id| Series::outline(graph.link_polyline(id).iter().map(|p| (p.x, p.y)).collect()))
            .collect();
    }
    graph
        .lanes
        .iter()
        .map(|l| Series::outline(l.points.iter().map(|p| (p[0], p[1])).collect()))
        .collect()
}

fn plot(input: &Path, out: &Path, map: Option<String>, config: Option<&Path>) -> Result<u8> {
    let name = input.display().to_string();
    let text = read_input(input)?;
    let table = Table::parse(&text, &name)?;
    if table.rows.is_empty() {
        return Err(CliError::Usage(format!("{name}: no data rows")));
    }
    let graph = match (map, config) {
        (Some(m), _) => Some(load_map(&m, None)?),
        (None, Some(p)) => {
            let cfg = ScenarioConfig::load(p, &[])?;
            Some(cfg.load_map()?)
        }
        (None, None) => None,
    };
    let map_panel = |title: &str| {
        let mut p = Panel::new(title, "x [m]", "y [m]");
        p.equal_aspect = true;
        if let Some(g) = &graph {
            p.series.extend(outline(g));
        }
        p
    };
    let h = |n: &str| table.col(n);
    let panels = if let (Some(t), Some(x), Some(y), Some(_), Some(speed)) = (h("t"), h("x"), h("y"), h("theta"), h("speed")) {
        let mut traj = map_panel("Trajectories");
        traj.series.push(Series::new("ego", table.xy(x, y)?));
        let mut i = 1;
        while let (Some(nx), Some(ny)) = (h(&format!("npc{i}_x")), h(&format!("npc{i}_y"))) {
            traj.series.push(Series::new(format!("npc{i}"), table.xy(nx, ny)?));
            i += 1;
        }
        let mut vel = Panel::new("Ego speed", "t [s]", "speed [m/s]");
        vel.series.push(Series::new("ego", table.xy(t, speed)?));
        vec![traj, vel]
    } else if let (Some(team), Some(x), Some(y)) = (h("team"), h("x"), h("y")) {
        let mut by_team: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for i in 0..table.rows.len() {
            let key = table.rows[i].get(team).unwrap_or_default().to_string();
            let p = (table.num(i, x)?, table.num(i, y)?);
            match by_team.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(p),
                None => by_team.push((key, vec![p])),
            }
        }
        let mut traj = map_panel("Trajectories by team");
        traj.series.extend(by_team.into_iter().map(|(k, v)| Series::new(k, v)));
        vec![traj]
    } else if let (Some(tau), Some(t), Some(station), Some(speed)) = (h("tau"), h("t"), h("station"), h("speed")) {
        let mut curves: BTreeMap<String, (Curve, Curve)> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for i in 0..table.rows.len() {
            let key = format!("tau {}", table.num(i, tau)?);
            if !curves.contains_key(&key) {
                order.push(key.clone());
            }
            let e = curves.entry(key).or_default();
            let ti = table.num(i, t)?;
            e.0.push((ti, table.num(i, station)?));
            e.1.push((ti, table.num(i, speed)?));
        }
        let mut prog = Panel::new("Progress", "t [s]", "station [m]");
        let mut vel = Panel::new("Velocity", "t [s]", "speed [m/s]");
        for key in order {
            let (p, v) = curves.remove(&key).expect("key recorded");
            prog.series.push(Series::new(key.clone(), p));
            vel.series.push(Series::new(key, v));
        }
        vec![prog, vel]
    } else if let (Some(t), Some(tx), Some(ty), Some(fx), Some(fy), Some(ox), Some(oy), Some(fe), Some(oe)) = (
        h("t"),
        h("truth_x"),
        h("truth_y"),
        h("fused_x"),
        h("fused_y"),
        h("odom_x"),
        h("odom_y"),
        h("fused_error"),
        h("odom_error"),
    ) {
        let mut traj = map_panel("Localization replay");
        traj.series.push(Series::new("truth", table.xy(tx, ty)?));
        traj.series.push(Series::new("fused", table.xy(fx, fy)?));
        traj.series.push(Series::new("odometry", table.xy(ox, oy)?));
        let mut err = Panel::new("Planar error", "t [s]", "error [m]");
        err.series.push(Series::new("fused", table.xy(t, fe)?));
        err.series.push(Series::new("odometry", table.xy(t, oe)?));
        vec![traj, err]
    } else {
        return Err(CliError::Usage(format!(
            "{name}: unrecognized columns `{}`",
            table.headers.join(",")
        )));
    };
    let stem = input.file_stem().map_or("plot".to_string(), |s| s.to_string_lossy().into_owned());
    write_out(out, &format!("{stem}.svg"), &document(&panels, 900.0, 560.0))?;
    Ok(0)
}
