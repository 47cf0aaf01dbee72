//! Closed-loop simulation: each agent integrates its own coupled model under
//! the applied control, followers are then projected back onto the grasp
//! constraint, and every sampling instant is recorded.

mod config;

pub use config::{
    AgentConfig, ConfigError, FollowerConfig, GraspConfig, InputCostConfig, LeaderConfig, LimitsConfig, NumericsConfig,
    ObjectConfig, ObstacleConfig, PoseConfig, Scenario, ScenarioConfig,
};

use cotrans_core::agent::{agent_ellipsoids, singularity_measure, AgentParams, AgentState};
use cotrans_core::constraints::{feasibility_report, input_residuals, state_residuals, Neighbor, StateContext};
use cotrans_core::coupled::{error_state, forward_dynamics};
use cotrans_core::object::{object_pose_from_agent, object_twist_from_agent, ObjectParams, ObjectPose, ObjectTwist};
use cotrans_core::spatial::Ellipsoid;
use cotrans_core::ModelError;
use log::info;
use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::comms::{run_round, Bus, RoundError, TeamController};
use crate::fhocp::{SolveStatus, TerminalMode};
use crate::ode::rk4;

/// Residual tolerance of the runtime constraint monitor.
pub const MONITOR_TOL: f64 = crate::fhocp::MONITOR_TOL;
/// Target accuracy of the closure projection.
pub const PROJECTION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initial configuration is infeasible: {0}")]
    InitialInfeasible(String),
    #[error("agent {agent} reached a kinematic singularity at t = {t:.3}: {source}")]
    Singularity { agent: usize, t: f64, source: ModelError },
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error("closure projection for agent {agent} did not converge (residual {residual:.3e})")]
    Projection { agent: usize, residual: f64 },
    #[error("model evaluation failed: {0}")]
    Model(#[from] ModelError),
    #[error("monitor: {label} of agent {agent} exceeds tolerance by {value:.3e} at t = {t:.3}")]
    Monitor { agent: usize, label: String, value: f64, t: f64 },
}

/// One RK4 step of length `h` split into `substeps`, holding `u` constant.
pub fn integrate_step(
    agent: &AgentParams<f64>,
    object: &ObjectParams<f64>,
    state: &AgentState<f64>,
    u: &DVector<f64>,
    h: f64,
    substeps: usize,
) -> Result<AgentState<f64>, ModelError> {
    let n = agent.dof();
    let x0 = DVector::from_iterator(2 * n, state.q.iter().chain(state.qdot.iter()).copied());
    let x = rk4(
        |x: &DVector<f64>| {
            let s = AgentState::new(x.rows(0, n).into_owned(), x.rows(n, n).into_owned());
            let (v, a) = forward_dynamics(agent, object, &s, u)?;
            Ok(DVector::from_iterator(2 * n, v.iter().chain(a.iter()).copied()))
        },
        &x0,
        h,
        substeps,
    )?;
    Ok(AgentState::new(x.rows(0, n).into_owned(), x.rows(n, n).into_owned()))
}

/// `c(p) = r² (1 - level(p))`, largest over obstacles; positive inside one.
/// For a sphere of radius `r` this is `r² - ‖p - c‖²`.
pub fn obstacle_function(obstacles: &[Ellipsoid<f64>], p: &Vector3<f64>) -> f64 {
    obstacles.iter().map(|o| o.mean_square_radius() * (1.0 - o.level(p))).fold(f64::NEG_INFINITY, f64::max)
}

fn reduced_pose(agent: &AgentParams<f64>, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    Ok(object_pose_from_agent(agent, q)?.reduced(agent.task_rows()))
}

/// Largest distance between the object poses seen through any two agents.
pub fn closure_drift(team: &[AgentParams<f64>], states: &[AgentState<f64>]) -> Result<f64, ModelError> {
    let poses: Vec<DVector<f64>> =
        team.iter().zip(states).map(|(a, s)| reduced_pose(a, &s.q)).collect::<Result<_, _>>()?;
    let mut worst = 0.0f64;
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            worst = worst.max((&poses[i] - &poses[j]).norm());
        }
    }
    Ok(worst)
}

fn pose_jacobian(agent: &AgentParams<f64>, q: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
    let m = agent.task_dim();
    let mut j = DMatrix::zeros(m, q.len());
    for c in 0..q.len() {
        let d = 1e-6 * (1.0 + q[c].abs());
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[c] += d;
        qm[c] -= d;
        j.set_column(c, &((reduced_pose(agent, &qp)? - reduced_pose(agent, &qm)?) / (2.0 * d)));
    }
    Ok(j)
}

/// Moves every follower onto the leader's object pose and twist: Newton on
/// the configuration, then a linear solve for the velocity.
pub fn project_closure(team: &[AgentParams<f64>], states: &mut [AgentState<f64>]) -> Result<(), SimError> {
    let rows = team[0].task_rows();
    let target = reduced_pose(&team[0], &states[0].q)?;
    let twist = object_twist_from_agent(&team[0], &states[0].q, &states[0].qdot)?.reduced(rows);
    for i in 1..team.len() {
        let a = &team[i];
        let mut q = states[i].q.clone();
        let mut residual = reduced_pose(a, &q)? - &target;
        for _ in 0..20 {
            if residual.amax() <= PROJECTION_TOL {
                break;
            }
            let j = pose_jacobian(a, &q)?;
            let step = j.lu().solve(&residual).ok_or(SimError::Projection { agent: i, residual: residual.norm() })?;
            q -= step;
            residual = reduced_pose(a, &q)? - &target;
        }
        if residual.amax() > 1e-9 {
            return Err(SimError::Projection { agent: i, residual: residual.norm() });
        }
        let n = a.dof();
        let mut jv = DMatrix::zeros(rows.len(), n);
        for c in 0..n {
            let mut e = DVector::zeros(n);
            e[c] = 1.0;
            jv.set_column(c, &object_twist_from_agent(a, &q, &e)?.reduced(rows));
        }
        let qdot = jv.lu().solve(&twist).ok_or(SimError::Projection { agent: i, residual: f64::INFINITY })?;
        states[i] = AgentState::new(q, qdot);
    }
    Ok(())
}

/// Solver outcome of one agent at one sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSolveRecord {
    pub status: SolveStatus,
    pub iterations: usize,
    pub cost: f64,
    pub kkt: f64,
    pub max_violation: f64,
    pub tracking_error: Option<f64>,
}

/// Everything recorded at one sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub t: f64,
    pub states: Vec<AgentState<f64>>,
    /// Control applied on `[t, t + h)`.
    pub controls: Vec<DVector<f64>>,
    pub object_pose: ObjectPose<f64>,
    pub object_twist: ObjectTwist<f64>,
    pub error: DVector<f64>,
    pub error_norm: f64,
    pub terminal_value: f64,
    pub obstacle_function: f64,
    /// Grasp mismatch accumulated over the previous interval.
    pub drift_before_projection: f64,
    pub drift_after_projection: f64,
    pub singularity: Vec<f64>,
    pub max_state_residual: f64,
    pub max_input_residual: f64,
    pub worst_residual: String,
    pub solves: Vec<AgentSolveRecord>,
    pub terminal_mode: Option<TerminalMode>,
    /// `J(t_j) - (J(t_{j-1}) - stage cost)`; non-positive when the optimal
    /// cost decreases by at least the running cost just incurred.
    pub cost_decrease_slack: Option<f64>,
}

#[derive(Debug, Default)]
pub struct RunResult {
    pub rows: Vec<TraceRow>,
    pub messages: usize,
    pub outcome: Option<SimError>,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Abort on any monitored residual above tolerance.
    pub strict_monitor: bool,
}

fn monitor(
    scn: &Scenario,
    states: &[AgentState<f64>],
    controls: &[DVector<f64>],
    previous: &[DVector<f64>],
) -> Result<(f64, f64, String, usize), ModelError> {
    let n = scn.team.len();
    let qs: Vec<DVector<f64>> = states.iter().map(|s| s.q.clone()).collect();
    let ellipsoids: Vec<_> = scn.team.iter().zip(&qs).map(|(a, q)| agent_ellipsoids(a, q)).collect::<Result<_, _>>()?;
    let mut worst_state = f64::NEG_INFINITY;
    let mut worst_input = f64::NEG_INFINITY;
    let mut worst = (f64::NEG_INFINITY, String::new(), 0);
    for i in 0..n {
        let neighbors: Vec<Neighbor<f64>> =
            (0..n).filter(|l| *l != i).map(|l| Neighbor { id: l, ellipsoids: ellipsoids[l].clone() }).collect();
        let ctx = StateContext {
            agent: &scn.team[i],
            object: if i == 0 { Some(&scn.object) } else { None },
            obstacles: &scn.obstacles,
            neighbors: &neighbors,
        };
        let sr = state_residuals(&ctx, &states[i].q, &states[i].qdot)?;
        let udot = (&controls[i] - &previous[i]) / scn.grid.h;
        let ir = input_residuals(&scn.team[i], &states[i].q, &states[i].qdot, &controls[i], &udot)?;
        for (label, v, is_state) in
            sr.entries.iter().map(|(l, v)| (l, *v, true)).chain(ir.entries.iter().map(|(l, v)| (l, *v, false)))
        {
            if is_state {
                worst_state = worst_state.max(v);
            } else {
                worst_input = worst_input.max(v);
            }
            if v > worst.0 {
                worst = (v, format!("{i}:{label}"), i);
            }
        }
    }
    Ok((worst_state, worst_input, worst.1, worst.2))
}

/// Runs the closed loop from the scenario's initial state until its total
/// time, or until the leader error falls below the configured stop level.
/// The returned rows cover every completed sampling instant even when the
/// run aborts.
pub fn run_scenario(scn: &Scenario, bus: &mut dyn Bus, opts: RunOptions) -> RunResult {
    let mut result = RunResult::default();
    if let Err(e) = run_into(scn, bus, opts, &mut result) {
        result.outcome = Some(e);
    }
    result
}

fn run_into(scn: &Scenario, bus: &mut dyn Bus, opts: RunOptions, out: &mut RunResult) -> Result<(), SimError> {
    let h = scn.grid.h;
    let steps = scn.steps();
    let mut states = scn.initial.clone();
    let qs: Vec<DVector<f64>> = states.iter().map(|s| s.q.clone()).collect();
    let violated = feasibility_report(&scn.team, &qs, &scn.object, &scn.obstacles)?;
    if let Some((agent, label, value)) = violated.first() {
        return Err(SimError::InitialInfeasible(format!("agent {agent}: {label} = {value:.3e}")));
    }
    let drift0 = closure_drift(&scn.team, &states)?;
    if drift0 > 1e-6 {
        return Err(SimError::InitialInfeasible(format!("grasp offsets disagree on the object pose by {drift0:.3e}")));
    }
    let mut ctrl = TeamController::new(scn, &states)?;
    let mut drift_before = 0.0;
    let mut previous_cost: Option<(f64, f64)> = None;

    for j in 0..=steps {
        let t = j as f64 * h;
        let previous_controls = ctrl.applied.clone();
        let round = run_round(scn, j, t, &states, &mut ctrl, bus)?;
        let leader = &round.solutions[0];

        let e = error_state(&scn.team[0], &states[0].q, &states[0].qdot, &scn.x_des)?.to_vector();
        let pose = object_pose_from_agent(&scn.team[0], &states[0].q)?;
        let (max_state, max_input, worst_residual, worst_agent) =
            monitor(scn, &states, &round.controls, &previous_controls)?;
        if opts.strict_monitor && max_state.max(max_input) > MONITOR_TOL {
            return Err(SimError::Monitor {
                agent: worst_agent,
                label: worst_residual,
                value: max_state.max(max_input),
                t,
            });
        }
        let row = TraceRow {
            round: j,
            t,
            controls: round.controls.clone(),
            object_pose: pose,
            object_twist: object_twist_from_agent(&scn.team[0], &states[0].q, &states[0].qdot)?,
            error_norm: e.norm(),
            terminal_value: e.dot(&(&scn.leader.p * &e)),
            error: e,
            obstacle_function: obstacle_function(&scn.obstacles, &pose.p),
            drift_before_projection: drift_before,
            drift_after_projection: closure_drift(&scn.team, &states)?,
            singularity: scn
                .team
                .iter()
                .zip(&states)
                .map(|(a, s)| singularity_measure(a, &s.q))
                .collect::<Result<_, _>>()?,
            max_state_residual: max_state,
            max_input_residual: max_input,
            worst_residual,
            solves: round
                .solutions
                .iter()
                .map(|s| AgentSolveRecord {
                    status: s.status,
                    iterations: s.iterations,
                    cost: s.cost,
                    kkt: s.kkt,
                    max_violation: s.max_violation,
                    tracking_error: s.tracking_error,
                })
                .collect(),
            terminal_mode: leader.terminal_mode,
            cost_decrease_slack: previous_cost.map(|(c, stage)| leader.cost - (c - stage)),
            states: states.clone(),
        };
        previous_cost = Some((leader.cost, leader.first_stage_cost));
        out.messages += round.messages;
        let stop = row.error_norm <= scn.config.numerics.stop_error;
        if j % 50 == 0 {
            info!(target: "sim", "t = {t:.1}: |e1| = {:.4e}, V = {:.4e}", row.error_norm, row.terminal_value);
        }
        out.rows.push(row);
        if j == steps || stop {
            break;
        }

        let mut next = Vec::with_capacity(states.len());
        for (i, (a, s)) in scn.team.iter().zip(&states).enumerate() {
            let stepped = integrate_step(a, &scn.object, s, &round.controls[i], h, scn.config.numerics.plant_substeps)
                .map_err(|source| match source {
                    ModelError::KinematicSingularity { .. } => SimError::Singularity { agent: i, t, source },
                    other => SimError::Model(other),
                })?;
            next.push(stepped);
        }
        states = next;
        drift_before = closure_drift(&scn.team, &states)?;
        project_closure(&scn.team, &mut states)?;
    }
    Ok(())
}
