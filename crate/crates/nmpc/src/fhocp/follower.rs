use cotrans_core::agent::{AgentParams, AgentState};
use cotrans_core::constraints::{input_residuals, state_residuals, ConstraintResiduals, Neighbor, StateContext};
use cotrans_core::coupled::{equilibrium_input, forward_dynamics};
use cotrans_core::object::{object_pose_from_agent, object_twist_from_agent, ObjectParams, ObjectPose, ObjectTwist};
use cotrans_core::spatial::Ellipsoid;
use cotrans_core::ModelError;
use log::debug;
use nalgebra::DVector;

use super::shooting::{HorizonModel, ShootingProblem};
use super::{
    check_initial, join_state, object_path, prediction_agent, split_state, FhocpError, HorizonGrid, HorizonSolution,
    SolveStatus,
};
use crate::sqp::{solve, SqpOptions};

/// Object pose and twist the follower must reproduce at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectReference {
    pub pose: ObjectPose<f64>,
    pub twist: ObjectTwist<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSettings {
    /// Weight on `‖u - u_eq(q)‖²`.
    pub input_weight: f64,
    /// Weight on `‖q̇‖²`.
    pub rate_weight: f64,
    /// Penalty weights tried in turn on the object-pose mismatch.
    pub penalties: Vec<f64>,
    /// Node mismatch accepted as converged.
    pub match_tol: f64,
    /// Node mismatch beyond which the solve is reported infeasible.
    pub degraded_tol: f64,
    pub prediction_floor: f64,
    pub sqp: SqpOptions,
}

impl Default for FollowerSettings {
    fn default() -> Self {
        Self {
            input_weight: 1e-3,
            rate_weight: 1e-3,
            penalties: vec![1e4, 1e6, 1e8],
            match_tol: 1e-4,
            degraded_tol: 1e-2,
            prediction_floor: 1e-8,
            sqp: SqpOptions::default(),
        }
    }
}

/// Follower prediction model: quadratic effort cost plus penalties pulling
/// the object pose and twist seen through this agent onto the reference.
pub struct FollowerModel<'a> {
    pub agent: &'a AgentParams<f64>,
    predictor: AgentParams<f64>,
    pub object: &'a ObjectParams<f64>,
    /// One entry per node `0..=K`.
    pub reference: &'a [ObjectReference],
    pub obstacles: &'a [Ellipsoid<f64>],
    /// Lower-priority agents at their current configuration.
    pub current: &'a [Neighbor<f64>],
    /// Higher-priority agents at each node of their prediction.
    pub predicted: &'a [Vec<Neighbor<f64>>],
    pub settings: &'a FollowerSettings,
    pub penalty: f64,
    h: f64,
}

impl<'a> FollowerModel<'a> {
    pub fn new(input: &FollowerInput<'a>, penalty: f64) -> Self {
        Self {
            agent: input.agent,
            predictor: prediction_agent(input.agent, input.settings.prediction_floor),
            object: input.object,
            reference: input.reference,
            obstacles: input.obstacles,
            current: input.current,
            predicted: input.predicted,
            settings: input.settings,
            penalty,
            h: input.grid.h,
        }
    }

    fn pose_mismatch(&self, k: usize, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let rows = self.agent.task_rows();
        Ok(object_pose_from_agent(self.agent, q)?.reduced(rows) - self.reference[k].pose.reduced(rows))
    }

    /// Largest object-pose mismatch over nodes `1..=K`.
    pub fn tracking_error(&self, states: &[DVector<f64>]) -> Result<f64, ModelError> {
        let mut worst = 0.0f64;
        for (k, x) in states.iter().enumerate().skip(1) {
            let (q, _) = split_state(x);
            worst = worst.max(self.pose_mismatch(k, &q)?.norm());
        }
        Ok(worst)
    }

    fn neighbors_at(&self, k: usize) -> Vec<Neighbor<f64>> {
        let mut out = self.current.to_vec();
        if let Some(p) = self.predicted.get(k) {
            out.extend(p.iter().cloned());
        }
        out
    }
}

impl HorizonModel for FollowerModel<'_> {
    fn state_dim(&self) -> usize {
        2 * self.agent.dof()
    }

    fn control_dim(&self) -> usize {
        self.agent.task_dim()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let (q, qd) = split_state(x);
        let (v, a) = forward_dynamics(&self.predictor, self.object, &AgentState::new(q, qd), u)?;
        Ok(join_state(&v, &a))
    }

    fn running_residual(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let (q, qd) = split_state(x);
        let du = u - equilibrium_input(&self.predictor, self.object, &q)?;
        Ok(join_state(&(du * self.settings.input_weight.sqrt()), &(qd * self.settings.rate_weight.sqrt())))
    }

    fn node_residual(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let (q, qd) = split_state(x);
        let rows = self.agent.task_rows();
        let w = self.penalty.sqrt();
        let dp = self.pose_mismatch(k, &q)? * w;
        let dv = (object_twist_from_agent(self.agent, &q, &qd)?.reduced(rows) - self.reference[k].twist.reduced(rows))
            * (w * self.h);
        Ok(join_state(&dp, &dv))
    }

    fn terminal_residual(&self, _x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(DVector::zeros(0))
    }

    fn interval_constraints(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        u_prev: &DVector<f64>,
    ) -> Result<ConstraintResiduals<f64>, ModelError> {
        let (q, qd) = split_state(x);
        input_residuals(self.agent, &q, &qd, u, &((u - u_prev) / self.h))
    }

    fn node_constraints(&self, k: usize, x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError> {
        let (q, qd) = split_state(x);
        let neighbors = self.neighbors_at(k);
        let ctx = StateContext { agent: self.agent, object: None, obstacles: self.obstacles, neighbors: &neighbors };
        state_residuals(&ctx, &q, &qd)
    }
}

/// Data for one follower solve at a sampling instant.
#[derive(Debug, Clone, Copy)]
pub struct FollowerInput<'a> {
    pub agent: &'a AgentParams<f64>,
    pub object: &'a ObjectParams<f64>,
    pub reference: &'a [ObjectReference],
    pub obstacles: &'a [Ellipsoid<f64>],
    pub current: &'a [Neighbor<f64>],
    pub predicted: &'a [Vec<Neighbor<f64>>],
    pub state: &'a AgentState<f64>,
    pub u_prev: &'a DVector<f64>,
    pub warm: &'a [DVector<f64>],
    pub grid: HorizonGrid,
    pub settings: &'a FollowerSettings,
}

/// Solves the follower problem with increasing penalty weights until the
/// predicted object pose matches the reference within `match_tol`.
pub fn solve_follower(input: &FollowerInput<'_>) -> Result<HorizonSolution, FhocpError> {
    let s = input.settings;
    let k = input.grid.intervals;
    if input.warm.len() != k || input.reference.len() != k + 1 {
        return Err(FhocpError::Grid(format!(
            "follower needs {k} warm controls and {} reference nodes, got {} and {}",
            k + 1,
            input.warm.len(),
            input.reference.len()
        )));
    }
    if s.penalties.is_empty() || s.penalties.iter().any(|p| !(*p > 0.0)) {
        return Err(FhocpError::Grid("penalty schedule must be non-empty and positive".into()));
    }
    let now = {
        let mut n = input.current.to_vec();
        if let Some(p) = input.predicted.first() {
            n.extend(p.iter().cloned());
        }
        n
    };
    let ctx = StateContext { agent: input.agent, object: None, obstacles: input.obstacles, neighbors: &now };
    check_initial(&state_residuals(&ctx, &input.state.q, &input.state.qdot)?)?;

    let x0 = join_state(&input.state.q, &input.state.qdot);
    let mut z = ShootingProblem::<FollowerModel>::stack(input.warm);
    let mut best: Option<HorizonSolution> = None;
    for &penalty in &s.penalties {
        let model = FollowerModel::new(input, penalty);
        let problem = ShootingProblem::new(&model, input.grid, x0.clone(), input.u_prev.clone());
        let res = solve(&problem, &z, &s.sqp)?;
        z = res.z.clone();
        let states = problem.rollout(&z)?;
        let first_stage_cost = problem.stage_cost(&z, &states, 0)?;
        let mismatch = model.tracking_error(&states)?;
        let (object_poses, object_twists) = object_path(input.agent, &states)?;
        let status = if res.max_violation > super::MONITOR_TOL || mismatch > s.degraded_tol {
            SolveStatus::Infeasible
        } else if mismatch <= s.match_tol && res.max_violation <= s.sqp.feas_tol {
            SolveStatus::Converged
        } else {
            SolveStatus::Degraded
        };
        debug!(
            target: "fhocp",
            "follower penalty {penalty:.0e}: mismatch {mismatch:.3e}, {} its, viol {:.2e}, tightest {:?}",
            res.iterations,
            res.max_violation,
            problem.worst_constraint(&z, &res.eval.ineq)
        );
        let done = mismatch <= s.match_tol;
        best = Some(HorizonSolution {
            controls: problem.unstack(&z),
            states,
            object_poses,
            object_twists,
            cost: res.eval.objective,
            status,
            iterations: res.iterations + best.as_ref().map_or(0, |b| b.iterations),
            kkt: res.kkt,
            max_violation: res.max_violation,
            worst_constraint: problem.worst_constraint(&z, &res.eval.ineq),
            terminal_mode: None,
            first_stage_cost,
            tracking_error: Some(mismatch),
            used_elastic: res.used_elastic || best.as_ref().is_some_and(|b| b.used_elastic),
        });
        if done {
            break;
        }
    }
    Ok(best.expect("penalty schedule is non-empty"))
}
