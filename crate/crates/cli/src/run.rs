use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::time::Instant;

use cotrans_nmpc::comms::{Bus, LiveBus, ReplayBus};
use cotrans_nmpc::sim::{run_scenario, RunOptions, RunResult, Scenario, SimError};
use cotrans_nmpc::trace::{write_csv, Summary};
use log::{error, info};

use crate::scenario::{parse_scenario, ScenarioError};

/// Process exit status, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Io = 1,
    InvalidScenario = 2,
    InitialInfeasibility = 3,
    SolverFailure = 4,
    Singularity = 5,
    MonitorViolation = 6,
}

impl ExitCode {
    pub fn reason(self) -> &'static str {
        match self {
            ExitCode::Ok => "completed",
            ExitCode::Io => "i/o error",
            ExitCode::InvalidScenario => "invalid scenario",
            ExitCode::InitialInfeasibility => "initial infeasibility",
            ExitCode::SolverFailure => "solver failure",
            ExitCode::Singularity => "kinematic singularity",
            ExitCode::MonitorViolation => "constraint monitor violation",
        }
    }

    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn of(err: &SimError) -> Self {
        match err {
            SimError::Config(_) => ExitCode::InvalidScenario,
            SimError::InitialInfeasible(_) => ExitCode::InitialInfeasibility,
            SimError::Round(r) if r.is_initial_infeasibility() => ExitCode::InitialInfeasibility,
            SimError::Singularity { .. } => ExitCode::Singularity,
            SimError::Monitor { .. } => ExitCode::MonitorViolation,
            SimError::Round(_) | SimError::Projection { .. } | SimError::Model(_) => ExitCode::SolverFailure,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunRequest {
    /// Scenario file, or the name of a bundled scenario.
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub horizon_s: Option<f64>,
    pub total_time_s: Option<f64>,
    pub seed: Option<u64>,
    pub strict_monitor: bool,
    /// Serve follower inputs from this message log instead of live solves.
    pub replay: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunReport {
    pub exit: ExitCode,
    pub message: String,
    pub result: Option<RunResult>,
    /// Published messages that differ from the replayed log.
    pub replay_mismatches: Option<usize>,
}

impl RunReport {
    fn failed(exit: ExitCode, message: String) -> Self {
        error!("{}: {message}", exit.reason());
        Self { exit, message, result: None, replay_mismatches: None }
    }
}

pub fn load(req: &RunRequest) -> Result<Scenario, (ExitCode, String)> {
    let mut cfg = parse_scenario(&req.scenario).map_err(|e| match e {
        ScenarioError::Io { .. } => (ExitCode::Io, e.to_string()),
        _ => (ExitCode::InvalidScenario, e.to_string()),
    })?;
    if let Some(h) = req.horizon_s {
        cfg.horizon_s = h;
    }
    if let Some(t) = req.total_time_s {
        cfg.total_time_s = t;
    }
    if let Some(s) = req.seed {
        cfg.seed = s;
    }
    cfg.build().map_err(|e| (ExitCode::InvalidScenario, e.to_string()))
}

/// Runs a scenario and writes `trace.csv`, `messages.jsonl` and
/// `summary.json` into the output directory.
pub fn run(req: &RunRequest) -> RunReport {
    let scn = match load(req) {
        Ok(s) => s,
        Err((code, msg)) => return RunReport::failed(code, msg),
    };
    if let Err(e) = std::fs::create_dir_all(&req.out) {
        return RunReport::failed(ExitCode::Io, format!("{}: {e}", req.out.display()));
    }
    let io = |e: std::io::Error| RunReport::failed(ExitCode::Io, e.to_string());
    info!("running {} for {} s", scn.config.name, scn.config.total_time_s);
    let started = Instant::now();
    let (result, mismatches) = match &req.replay {
        Some(path) => {
            let file = match File::open(path) {
                Ok(f) => f,
                Err(e) => return io(e),
            };
            let mut bus = match ReplayBus::from_reader(BufReader::new(file)) {
                Ok(b) => b,
                Err(e) => return RunReport::failed(ExitCode::Io, e.to_string()),
            };
            let r = run_scenario(&scn, &mut bus as &mut dyn Bus, RunOptions { strict_monitor: req.strict_monitor });
            (r, Some(bus.mismatches))
        }
        None => {
            let log = match File::create(req.out.join("messages.jsonl")) {
                Ok(f) => f,
                Err(e) => return io(e),
            };
            let mut bus = LiveBus::new(Some(Box::new(BufWriter::new(log))));
            let r = run_scenario(&scn, &mut bus, RunOptions { strict_monitor: req.strict_monitor });
            if let Err(e) = bus.flush() {
                return RunReport::failed(ExitCode::Io, e.to_string());
            }
            (r, None)
        }
    };
    let wall = started.elapsed().as_secs_f64();
    let exit = result.outcome.as_ref().map_or(ExitCode::Ok, ExitCode::of);
    let message = result.outcome.as_ref().map_or_else(|| exit.reason().to_string(), |e| e.to_string());

    let csv_name = if req.replay.is_some() { "trace_replay.csv" } else { "trace.csv" };
    let written = File::create(req.out.join(csv_name))
        .map_err(|e| e.to_string())
        .and_then(|f| write_csv(&scn, &result.rows, BufWriter::new(f)).map_err(|e| e.to_string()));
    if let Err(e) = written {
        return RunReport::failed(ExitCode::Io, e);
    }
    let summary = Summary::new(&scn, &result, &message, wall);
    let summary_name = if req.replay.is_some() { "summary_replay.json" } else { "summary.json" };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = std::fs::write(req.out.join(summary_name), json + "\n") {
        return io(e);
    }
    if exit != ExitCode::Ok {
        error!("{}: {message}", exit.reason());
    }
    info!("{} rows in {wall:.1} s", result.rows.len());
    RunReport { exit, message, result: Some(result), replay_mismatches: mismatches }
}
