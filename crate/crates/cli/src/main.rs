use std::path::PathBuf;

use clap::Parser;
use cotrans_cli::{run, RunRequest};

/// Run a cooperative transport scenario and write its trace.
#[derive(Debug, Parser)]
#[command(name = "cotrans", version)]
struct Args {
    /// Scenario file, or one of: paper_sec5, single_agent_smoke, two_agent_no_obstacle.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Prediction horizon override in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Simulated time override in seconds.
    #[arg(long = "total-time")]
    total_time: Option<f64>,
    /// Seed recorded in the output.
    #[arg(long)]
    seed: Option<u64>,
    /// Fail on any monitored residual above tolerance.
    #[arg(long = "strict-monitor")]
    strict_monitor: bool,
    /// Replay follower inputs from a recorded message log.
    #[arg(long)]
    replay: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let report = run(&RunRequest {
        scenario: a.scenario,
        out: a.out,
        horizon_s: a.horizon,
        total_time_s: a.total_time,
        seed: a.seed,
        strict_monitor: a.strict_monitor,
        replay: a.replay,
    });
    if let Some(m) = report.replay_mismatches {
        println!("replay mismatches: {m}");
    }
    println!("{}: {}", report.exit.reason(), report.message);
    std::process::exit(report.exit.code());
}
