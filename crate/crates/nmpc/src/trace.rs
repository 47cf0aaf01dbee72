//! Run output: one CSV row per sampling instant and a JSON summary.
//!
//! Column order (N agents, agent index `i`, zero-based):
//!
//! | columns | meaning |
//! |---|---|
//! | `round`, `t` | sampling index and time |
//! | `q{i}_{k}`, `qdot{i}_{k}` | agent configuration and rate |
//! | `u{i}_{k}` | control applied on `[t, t + h)` |
//! | `obj_x` … `obj_psi` | object pose through the leader |
//! | `obj_vx` … `obj_wz` | object twist through the leader |
//! | `e_{k}`, `e_norm`, `terminal_value` | leader error, its norm, `eᵀPe` |
//! | `obstacle_function` | largest `r²(1 - level)` over obstacles |
//! | `drift_pre`, `drift_post` | grasp mismatch before and after projection |
//! | `sing{i}` | singularity measure |
//! | `max_state_residual`, `max_input_residual`, `worst_residual` | monitor |
//! | `status{i}`, `iters{i}`, `cost{i}`, `kkt{i}`, `viol{i}`, `track{i}` | solver |
//! | `terminal_mode`, `cost_decrease_slack` | leader terminal handling |
//!
//! Floats use Rust's shortest round-trip formatting, so equal runs produce
//! byte-identical files. Empty cells mark values that do not apply.

use std::io::Write;

use serde::Serialize;

use crate::sim::{RunResult, Scenario, TraceRow};

/// Version of the column layout above.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Share of the initial error norm that ends the transient.
pub const ENVELOPE_FRACTION: f64 = 0.01;

const POSE: [&str; 6] = ["obj_x", "obj_y", "obj_z", "obj_phi", "obj_theta", "obj_psi"];
const TWIST: [&str; 6] = ["obj_vx", "obj_vy", "obj_vz", "obj_wx", "obj_wy", "obj_wz"];

pub fn header(scn: &Scenario) -> Vec<String> {
    let n = scn.team.len();
    let mut h = vec!["round".to_string(), "t".to_string()];
    for i in 0..n {
        let dof = scn.team[i].dof();
        h.extend((0..dof).map(|k| format!("q{i}_{k}")));
        h.extend((0..dof).map(|k| format!("qdot{i}_{k}")));
    }
    for i in 0..n {
        h.extend((0..scn.team[i].task_dim()).map(|k| format!("u{i}_{k}")));
    }
    h.extend(POSE.iter().chain(TWIST.iter()).map(|s| s.to_string()));
    h.extend((0..2 * scn.team[0].task_dim()).map(|k| format!("e_{k}")));
    h.extend(["e_norm", "terminal_value", "obstacle_function", "drift_pre", "drift_post"].map(String::from));
    h.extend((0..n).map(|i| format!("sing{i}")));
    h.extend(["max_state_residual", "max_input_residual", "worst_residual"].map(String::from));
    for i in 0..n {
        h.extend(["status", "iters", "cost", "kkt", "viol", "track"].iter().map(|s| format!("{s}{i}")));
    }
    h.extend(["terminal_mode", "cost_decrease_slack"].map(String::from));
    h
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

pub fn record(row: &TraceRow) -> Vec<String> {
    let mut r = vec![row.round.to_string(), f(row.t)];
    for s in &row.states {
        r.extend(s.q.iter().chain(s.qdot.iter()).map(|v| f(*v)));
    }
    for u in &row.controls {
        r.extend(u.iter().map(|v| f(*v)));
    }
    r.extend(row.object_pose.to_vector().iter().chain(row.object_twist.to_vector().iter()).map(|v| f(*v)));
    r.extend(row.error.iter().map(|v| f(*v)));
    r.extend(
        [
            row.error_norm,
            row.terminal_value,
            row.obstacle_function,
            row.drift_before_projection,
            row.drift_after_projection,
        ]
        .map(f),
    );
    r.extend(row.singularity.iter().map(|v| f(*v)));
    r.extend([f(row.max_state_residual), f(row.max_input_residual), row.worst_residual.clone()]);
    for s in &row.solves {
        r.extend([
            s.status.as_str().to_string(),
            s.iterations.to_string(),
            f(s.cost),
            f(s.kkt),
            f(s.max_violation),
            opt(s.tracking_error),
        ]);
    }
    r.push(row.terminal_mode.map(|m| m.as_str().to_string()).unwrap_or_default());
    r.push(opt(row.cost_decrease_slack));
    r
}

pub fn write_csv<W: Write>(scn: &Scenario, rows: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(scn))?;
    for row in rows {
        w.write_record(record(row))?;
    }
    w.flush()?;
    Ok(())
}

/// Structured run summary.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub schema_version: u32,
    pub seed: u64,
    pub sampling_period_s: f64,
    pub horizon_s: f64,
    pub total_time_s: f64,
    pub rows: usize,
    pub messages: usize,
    pub completed: bool,
    pub exit_reason: String,
    pub final_time_s: f64,
    pub final_error_norm: f64,
    pub final_position_error_m: f64,
    pub final_pose_error: f64,
    pub max_obstacle_function: f64,
    pub max_abs_input: f64,
    pub max_drift_pre: f64,
    pub max_drift_post: f64,
    pub min_singularity_measure: f64,
    pub max_state_residual: f64,
    pub max_input_residual: f64,
    pub degraded_solves: usize,
    pub positive_cost_decrease_slack: usize,
    pub max_cost_decrease_slack: f64,
    pub transient_end_s: Option<f64>,
    pub error_peaks: usize,
    pub envelope_non_increasing: bool,
    pub wall_clock_s: f64,
}

impl Summary {
    pub fn new(scn: &Scenario, result: &RunResult, exit_reason: &str, wall_clock_s: f64) -> Self {
        let rows = &result.rows;
        let last = rows.last();
        let fold = |g: &dyn Fn(&TraceRow) -> f64| rows.iter().map(g).fold(f64::NEG_INFINITY, f64::max);
        let rows_task = scn.team[0].task_rows();
        let slack: Vec<f64> = rows.iter().filter_map(|r| r.cost_decrease_slack).collect();
        let envelope = ErrorEnvelope::from_rows(rows, ENVELOPE_FRACTION);
        Self {
            scenario: scn.config.name.clone(),
            schema_version: TRACE_SCHEMA_VERSION,
            seed: scn.config.seed,
            sampling_period_s: scn.grid.h,
            horizon_s: scn.config.horizon_s,
            total_time_s: scn.config.total_time_s,
            rows: rows.len(),
            messages: result.messages,
            completed: result.is_ok(),
            exit_reason: exit_reason.to_string(),
            final_time_s: last.map_or(0.0, |r| r.t),
            final_error_norm: last.map_or(f64::NAN, |r| r.error_norm),
            final_position_error_m: last.map_or(f64::NAN, |r| (r.object_pose.p - scn.x_des.p).norm()),
            final_pose_error: last
                .map_or(f64::NAN, |r| (r.object_pose.reduced(rows_task) - scn.x_des.reduced(rows_task)).norm()),
            max_obstacle_function: fold(&|r| r.obstacle_function),
            max_abs_input: fold(&|r| r.controls.iter().map(|u| u.amax()).fold(0.0, f64::max)),
            max_drift_pre: fold(&|r| r.drift_before_projection),
            max_drift_post: fold(&|r| r.drift_after_projection),
            min_singularity_measure: -fold(&|r| -r.singularity.iter().copied().fold(f64::INFINITY, f64::min)),
            max_state_residual: fold(&|r| r.max_state_residual),
            max_input_residual: fold(&|r| r.max_input_residual),
            degraded_solves: rows
                .iter()
                .flat_map(|r| r.solves.iter())
                .filter(|s| s.status != crate::fhocp::SolveStatus::Converged)
                .count(),
            positive_cost_decrease_slack: slack.iter().filter(|s| **s > 1e-3).count(),
            max_cost_decrease_slack: slack.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            transient_end_s: envelope.transient_end,
            error_peaks: envelope.peaks.len(),
            envelope_non_increasing: envelope.is_non_increasing(),
            wall_clock_s,
        }
    }
}

/// Upper envelope of the leader error norm once the initial transient has
/// passed.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEnvelope {
    /// First time the error norm fell to `fraction · ‖e(0)‖`.
    pub transient_end: Option<f64>,
    /// `(t, ‖e‖)` at every local maximum after `transient_end`.
    pub peaks: Vec<(f64, f64)>,
}

impl ErrorEnvelope {
    pub fn from_rows(rows: &[TraceRow], fraction: f64) -> Self {
        let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
        let e: Vec<f64> = rows.iter().map(|r| r.error_norm).collect();
        Self::from_series(&t, &e, fraction)
    }

    pub fn from_series(t: &[f64], e: &[f64], fraction: f64) -> Self {
        let Some(&first) = e.first() else {
            return Self { transient_end: None, peaks: Vec::new() };
        };
        let Some(start) = e.iter().position(|v| *v <= fraction * first) else {
            return Self { transient_end: None, peaks: Vec::new() };
        };
        let peaks = (start.max(1)..e.len().saturating_sub(1))
            .filter(|&k| e[k] >= e[k - 1] && e[k] > e[k + 1])
            .map(|k| (t[k], e[k]))
            .collect();
        Self { transient_end: Some(t[start]), peaks }
    }

    /// Largest increase from one peak to the next; zero or negative when
    /// the envelope is non-increasing.
    pub fn max_rise(&self) -> f64 {
        self.peaks.windows(2).map(|w| w[1].1 - w[0].1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.transient_end.is_some() && self.peaks.windows(2).all(|w| w[1].1 <= w[0].1)
    }
}
