//! Finite-horizon optimal control problems and their transcription.
//!
//! Controls are piecewise constant on `K` intervals of length `h`. States at
//! the nodes come from an RK4 rollout (single shooting), the running cost is
//! integrated by the trapezoid rule on each interval, and constraints are
//! imposed at the nodes.

mod follower;
mod leader;
mod shooting;

pub use follower::{solve_follower, FollowerInput, FollowerModel, FollowerSettings, ObjectReference};
pub use leader::{solve_leader, FollowerRateMap, InputCost, LeaderInput, LeaderModel, LeaderSettings, TerminalMode};
pub use shooting::{HorizonModel, ShootingProblem};

use cotrans_core::agent::AgentParams;
use cotrans_core::constraints::ConstraintResiduals;
use cotrans_core::object::{object_pose_from_agent, object_twist_from_agent, ObjectPose, ObjectTwist};
use cotrans_core::ModelError;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sqp::NlpError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FhocpError {
    #[error("invalid horizon: {0}")]
    Grid(String),
    #[error("initial node violates {label} by {value:.3e}")]
    InitialInfeasible { label: String, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonGrid {
    /// Sampling period.
    pub h: f64,
    pub intervals: usize,
    /// RK4 sub-steps per interval in the prediction model.
    pub substeps: usize,
}

impl HorizonGrid {
    pub fn new(h: f64, horizon: f64) -> Result<Self, FhocpError> {
        if !(h > 0.0 && horizon > h * (1.0 - 1e-9)) {
            return Err(FhocpError::Grid(format!("need 0 < h <= T_p, got h = {h}, T_p = {horizon}")));
        }
        let k = (horizon / h).round();
        if (k * h - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(FhocpError::Grid(format!("T_p = {horizon} is not a multiple of h = {h}")));
        }
        Ok(Self { h, intervals: k as usize, substeps: 2 })
    }

    pub fn horizon(&self) -> f64 {
        self.h * self.intervals as f64
    }

    pub fn node_times(&self, t0: f64) -> Vec<f64> {
        (0..=self.intervals).map(|k| t0 + self.h * k as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Usable but short of the requested tolerances.
    Degraded,
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Degraded => "degraded",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    pub controls: Vec<DVector<f64>>,
    /// `[q; q̇]` at the `K + 1` nodes.
    pub states: Vec<DVector<f64>>,
    pub object_poses: Vec<ObjectPose<f64>>,
    pub object_twists: Vec<ObjectTwist<f64>>,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: f64,
    pub max_violation: f64,
    pub worst_constraint: Option<(String, f64)>,
    pub terminal_mode: Option<TerminalMode>,
    /// Largest node mismatch between the follower's object pose and its reference.
    pub tracking_error: Option<f64>,
    /// Running cost accumulated over the first interval.
    pub first_stage_cost: f64,
    pub used_elastic: bool,
}

/// First control of a solution and the shifted warm start for the next
/// sampling instant, with the last interval duplicated.
pub fn receding_step(solution: &HorizonSolution) -> (DVector<f64>, Vec<DVector<f64>>) {
    let u0 = solution.controls[0].clone();
    let mut warm: Vec<DVector<f64>> = solution.controls[1..].to_vec();
    warm.push(solution.controls.last().expect("at least one interval").clone());
    (u0, warm)
}

/// Monitor tolerance on constraint residuals.
pub const MONITOR_TOL: f64 = 1e-4;

/// Symmetric square root of a positive semidefinite matrix.
pub(crate) fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub(crate) fn split_state(x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.len() / 2;
    (x.rows(0, n).into_owned(), x.rows(n, n).into_owned())
}

pub(crate) fn join_state(q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(q.len() + qdot.len(), q.iter().chain(qdot.iter()).copied())
}

/// Copy of `agent` with the singularity floor lowered for prediction rollouts,
/// so that trial iterates near the floor stay evaluable; the real floor is
/// enforced as a constraint.
pub(crate) fn prediction_agent(agent: &AgentParams<f64>, floor: f64) -> AgentParams<f64> {
    let mut a = agent.clone();
    a.limits.singularity_floor = a.limits.singularity_floor.min(floor);
    a
}

pub(crate) fn object_path(
    agent: &AgentParams<f64>,
    states: &[DVector<f64>],
) -> Result<(Vec<ObjectPose<f64>>, Vec<ObjectTwist<f64>>), ModelError> {
    let mut poses = Vec::with_capacity(states.len());
    let mut twists = Vec::with_capacity(states.len());
    for x in states {
        let (q, qd) = split_state(x);
        poses.push(object_pose_from_agent(agent, &q)?);
        twists.push(object_twist_from_agent(agent, &q, &qd)?);
    }
    Ok((poses, twists))
}

/// Rejects a current state that already violates its constraints.
pub(crate) fn check_initial(r: &ConstraintResiduals<f64>) -> Result<(), FhocpError> {
    match r.max() {
        Some((label, v)) if v > MONITOR_TOL => {
            Err(FhocpError::InitialInfeasible { label: label.to_string(), value: v })
        }
        _ => Ok(()),
    }
}
