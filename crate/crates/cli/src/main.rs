//! `uak`: scenario runs, localization replays, route planning, trajectory
//! analysis and plots.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for completed runs that recorded a collision.
pub const EXIT_EVENT: u8 = 2;
/// Exit status for bad flags, configs or inputs.
pub const EXIT_USAGE: u8 = 3;
/// Exit status for I/O failures.
pub const EXIT_IO: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "uak", version, about = "Urban autonomous driving stack: simulate, localize, plan, analyze")]
#[command(after_help = "Exit status: 0 ok, 2 a collision was recorded, 3 usage or config error.\n\
    Set UAK_LOG (error, warn, info, debug, trace) for diagnostics on stderr.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config override as a dotted key and a TOML value, e.g. `tau=0.5`
    /// or `ego.acc.v_limit=10`. Applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its log, events, metrics and traces.
    SimRun {
        /// Scenario TOML file.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Random seed; overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Team name written in trajectory.csv (default: config file stem).
        #[arg(long)]
        team: Option<String>,
        /// Comma-separated aggressiveness values; runs the scenario once per
        /// value and writes sweep.csv and sweep.json instead of a single log.
        #[arg(long, value_delimiter = ',', value_name = "TAU,...")]
        tau_sweep: Vec<f64>,
    },
    /// Drive a route through a synthetic world and replay it through the
    /// localizer with noisy odometry and scans.
    LocalizeReplay {
        /// Replay TOML file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Random seed; overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Registration worker threads (results do not depend on it).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Plan a route over a road graph.
    PlanRoute {
        /// Scenario TOML file supplying `map`, `start`, `goal` and `via`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Road graph: `builtin:loop`, `builtin:two_lane_straight` or a JSON file.
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        goal: Option<String>,
        /// Intermediate node; repeatable.
        #[arg(long)]
        via: Vec<String>,
    },
    /// Pairwise trajectory similarity between teams.
    Analyze {
        /// Trajectory CSV files (`team,t,x,y`); at least two teams in total.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Output directory, created if absent.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// TOML file of `[[sections]]` with `name`, `kind` and `polygon`.
        #[arg(long)]
        sections: Option<PathBuf>,
        /// Neighbor rank for the divergence estimate.
        #[arg(long, default_value_t = uak_core::analysis::DEFAULT_K)]
        k: usize,
        /// Sections with fewer samples report mean error only.
        #[arg(long, default_value_t = uak_core::analysis::DEFAULT_MIN_SAMPLES)]
        min_samples: usize,
        /// Worker threads (results do not depend on it).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render a log, trajectory file, sweep or replay as SVG.
    Plot {
        /// A sim log.csv, trajectory.csv, sweep.csv or replay errors.csv.
        input: PathBuf,
        /// Output directory, created if absent.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Road graph drawn underneath map views.
        #[arg(long)]
        map: Option<String>,
        /// Scenario TOML whose `map` is drawn underneath map views.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UAK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
