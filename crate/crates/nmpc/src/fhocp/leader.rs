use cotrans_core::agent::{AgentParams, AgentState};
use cotrans_core::constraints::{
    input_residuals, state_residuals, ConstraintResiduals, Neighbor, ResidualLabel, Side, StateContext,
};
use cotrans_core::coupled::{equilibrium_input, error_state, forward_dynamics};
use cotrans_core::object::{object_twist_from_agent, ObjectParams, ObjectPose};
use cotrans_core::spatial::Ellipsoid;
use cotrans_core::ModelError;
use log::debug;
use nalgebra::{DMatrix, DVector};

use super::shooting::{HorizonModel, ShootingProblem};
use super::{
    check_initial, join_state, object_path, prediction_agent, split_state, sym_sqrt, FhocpError, HorizonGrid,
    HorizonSolution, SolveStatus, MONITOR_TOL,
};
use crate::sqp::{solve, SqpOptions, SqpStatus};

/// What the input weight `R` penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputCost {
    /// `uᵀ R u`.
    Absolute,
    /// `(u - u_eq(q))ᵀ R (u - u_eq(q))`, with `u_eq` holding the agent still.
    GravityCompensated,
}

/// How the terminal set enters the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalMode {
    Hard,
    Soft,
}

impl TerminalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalMode::Hard => "hard",
            TerminalMode::Soft => "soft",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSettings {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Terminal level `ε₁`.
    pub terminal_eps: f64,
    /// Weight on the squared distance of `P½e` from the ball of radius `√ε₁` in soft mode.
    pub soft_terminal_weight: f64,
    /// Hard mode is tried once the warm start reaches `V <= factor · ε₁`.
    pub hard_entry_factor: f64,
    pub input_cost: InputCost,
    /// Factor on the input, torque and rate bounds the leader plans against,
    /// leaving followers room to reproduce its motion.
    pub limit_scale: f64,
    /// Singularity floor used inside prediction rollouts.
    pub prediction_floor: f64,
    pub sqp: SqpOptions,
}

impl LeaderSettings {
    pub fn validate(&self, error_dim: usize, control_dim: usize) -> Result<(), FhocpError> {
        let bad = |m: &str| Err(FhocpError::Grid(m.to_string()));
        if self.q.shape() != (error_dim, error_dim) || self.p.shape() != (error_dim, error_dim) {
            return bad("Q and P must match the error dimension");
        }
        if self.r.shape() != (control_dim, control_dim) {
            return bad("R must match the control dimension");
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !sym(&self.q) || self.q.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
            return bad("Q must be symmetric positive semidefinite");
        }
        for (name, m) in [("R", &self.r), ("P", &self.p)] {
            if !sym(m) || m.clone().cholesky().is_none() {
                return Err(FhocpError::Grid(format!("{name} must be symmetric positive definite")));
            }
        }
        if !(self.limit_scale > 0.0 && self.limit_scale <= 1.0) {
            return bad("limit scale must lie in (0, 1]");
        }
        if !(self.terminal_eps > 0.0 && self.soft_terminal_weight > 0.0 && self.hard_entry_factor >= 0.0) {
            return bad("terminal parameters must be positive");
        }
        Ok(())
    }
}

/// Joint rates a follower needs to reproduce an object twist, linearized at
/// the follower's current configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerRateMap {
    pub agent: usize,
    params: AgentParams<f64>,
    /// `q̇ = T v` with `v` the reduced object twist.
    pub map: DMatrix<f64>,
}

impl FollowerRateMap {
    pub fn new(agent: usize, params: &AgentParams<f64>, q: &DVector<f64>) -> Result<Self, ModelError> {
        let rows = params.task_rows();
        let n = params.dof();
        let mut jv = DMatrix::zeros(rows.len(), n);
        for c in 0..n {
            let mut e = DVector::zeros(n);
            e[c] = 1.0;
            jv.set_column(c, &object_twist_from_agent(params, q, &e)?.reduced(rows));
        }
        let map = jv
            .try_inverse()
            .ok_or_else(|| ModelError::KinematicSingularity { measure: 0.0, floor: params.limits.singularity_floor })?;
        Ok(Self { agent, params: params.clone(), map })
    }

    /// Rate residuals of the follower for object twist `v`, bounds scaled by `scale`.
    pub fn residuals(&self, v: &DVector<f64>, scale: f64, out: &mut ConstraintResiduals<f64>) {
        let qd = &self.map * v;
        let lim = &self.params.limits;
        if let Some(vmax) = lim.qdot_max {
            for (joint, &r) in qd.iter().enumerate() {
                out.push(
                    ResidualLabel::FollowerJointRate { agent: self.agent, joint, side: Side::Upper },
                    r - scale * vmax,
                );
                out.push(
                    ResidualLabel::FollowerJointRate { agent: self.agent, joint, side: Side::Lower },
                    -r - scale * vmax,
                );
            }
        }
        if let Some(amax) = lim.arm_rate_max {
            out.push(
                ResidualLabel::FollowerArmRate { agent: self.agent },
                self.params.alpha(&qd).norm() - scale * amax,
            );
        }
    }
}

/// Leader prediction model over `x = [q; q̇]`.
pub struct LeaderModel<'a> {
    pub agent: &'a AgentParams<f64>,
    predictor: AgentParams<f64>,
    planner: AgentParams<f64>,
    pub object: &'a ObjectParams<f64>,
    pub x_des: ObjectPose<f64>,
    pub obstacles: &'a [Ellipsoid<f64>],
    /// Current bounding ellipsoids of every other agent.
    pub neighbors: &'a [Neighbor<f64>],
    pub followers: &'a [FollowerRateMap],
    pub settings: &'a LeaderSettings,
    pub mode: TerminalMode,
    h: f64,
    q_half: DMatrix<f64>,
    r_half: DMatrix<f64>,
    p_half: DMatrix<f64>,
}

impl<'a> LeaderModel<'a> {
    pub fn new(input: &LeaderInput<'a>, mode: TerminalMode) -> Self {
        let s = input.settings;
        Self {
            agent: input.agent,
            predictor: prediction_agent(input.agent, s.prediction_floor),
            planner: scaled_limits(input.agent, s.limit_scale),
            object: input.object,
            x_des: input.x_des,
            obstacles: input.obstacles,
            neighbors: input.neighbors,
            followers: input.followers,
            settings: s,
            mode,
            h: input.grid.h,
            q_half: sym_sqrt(&s.q),
            r_half: sym_sqrt(&s.r),
            p_half: sym_sqrt(&s.p),
        }
    }

    pub fn error(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let (q, qd) = split_state(x);
        Ok(error_state(self.agent, &q, &qd, &self.x_des)?.to_vector())
    }

    /// `V₁(e) = eᵀ P e`.
    pub fn terminal_value(&self, x: &DVector<f64>) -> Result<f64, ModelError> {
        let e = self.error(x)?;
        Ok(e.dot(&(&self.settings.p * &e)))
    }

    fn context(&self) -> StateContext<'_, f64> {
        StateContext {
            agent: &self.planner,
            object: Some(self.object),
            obstacles: self.obstacles,
            neighbors: self.neighbors,
        }
    }
}

impl HorizonModel for LeaderModel<'_> {
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
        let e = self.error(x)?;
        let du = match self.settings.input_cost {
            InputCost::Absolute => u.clone(),
            InputCost::GravityCompensated => {
                let (q, _) = split_state(x);
                u - equilibrium_input(&self.predictor, self.object, &q)?
            }
        };
        Ok(join_state(&(&self.q_half * e), &(&self.r_half * du)))
    }

    fn terminal_residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let e = self.error(x)?;
        let base = &self.p_half * &e;
        match self.mode {
            TerminalMode::Hard => Ok(base),
            TerminalMode::Soft => {
                // Offset of `base` from the ball of radius √ε₁; its squared norm is
                // the penalty and its Jacobian keeps the curvature of the norm.
                let norm = base.norm();
                let radius = self.settings.terminal_eps.sqrt();
                let outside = if norm > radius {
                    &base * ((1.0 - radius / norm) * self.settings.soft_terminal_weight.sqrt())
                } else {
                    DVector::zeros(base.len())
                };
                let n = base.len();
                let mut r = DVector::zeros(2 * n);
                r.rows_mut(0, n).copy_from(&base);
                r.rows_mut(n, n).copy_from(&outside);
                Ok(r)
            }
        }
    }

    fn interval_constraints(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        u_prev: &DVector<f64>,
    ) -> Result<ConstraintResiduals<f64>, ModelError> {
        let (q, qd) = split_state(x);
        input_residuals(&self.planner, &q, &qd, u, &((u - u_prev) / self.h))
    }

    fn node_constraints(&self, _k: usize, x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError> {
        let (q, qd) = split_state(x);
        let mut r = state_residuals(&self.context(), &q, &qd)?;
        if !self.followers.is_empty() {
            let v = object_twist_from_agent(self.agent, &q, &qd)?.reduced(self.agent.task_rows());
            for f in self.followers {
                f.residuals(&v, self.settings.limit_scale, &mut r);
            }
        }
        Ok(r)
    }

    fn terminal_constraints(&self, x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError> {
        let mut r = ConstraintResiduals::new();
        if self.mode == TerminalMode::Hard {
            r.push(ResidualLabel::Terminal, self.terminal_value(x)? - self.settings.terminal_eps);
        }
        Ok(r)
    }
}

fn scaled_limits(agent: &AgentParams<f64>, scale: f64) -> AgentParams<f64> {
    let mut a = agent.clone();
    let l = &mut a.limits;
    for b in [&mut l.input_box, &mut l.tau_max, &mut l.tau_rate_max, &mut l.qdot_max, &mut l.arm_rate_max] {
        *b = b.map(|v| v * scale);
    }
    a
}

/// Data for one leader solve at a sampling instant.
#[derive(Debug, Clone, Copy)]
pub struct LeaderInput<'a> {
    pub agent: &'a AgentParams<f64>,
    pub object: &'a ObjectParams<f64>,
    pub x_des: ObjectPose<f64>,
    pub obstacles: &'a [Ellipsoid<f64>],
    pub neighbors: &'a [Neighbor<f64>],
    /// Rate maps of the followers the leader plans for; may be empty.
    pub followers: &'a [FollowerRateMap],
    pub state: &'a AgentState<f64>,
    /// Control applied on the previous interval.
    pub u_prev: &'a DVector<f64>,
    pub warm: &'a [DVector<f64>],
    pub grid: HorizonGrid,
    pub settings: &'a LeaderSettings,
    pub previous_mode: Option<TerminalMode>,
}

/// Solves the leader problem, trying the hard terminal constraint first when
/// the warm start is close to the terminal set and falling back to the soft
/// penalty when the hard problem ends infeasible.
pub fn solve_leader(input: &LeaderInput<'_>) -> Result<HorizonSolution, FhocpError> {
    let s = input.settings;
    s.validate(2 * input.agent.task_dim(), input.agent.task_dim())?;
    if input.warm.len() != input.grid.intervals {
        return Err(FhocpError::Grid(format!(
            "warm start has {} intervals, horizon has {}",
            input.warm.len(),
            input.grid.intervals
        )));
    }
    let ctx = StateContext {
        agent: input.agent,
        object: Some(input.object),
        obstacles: input.obstacles,
        neighbors: input.neighbors,
    };
    check_initial(&state_residuals(&ctx, &input.state.q, &input.state.qdot)?)?;

    let x0 = join_state(&input.state.q, &input.state.qdot);
    let z0 = ShootingProblem::<LeaderModel>::stack(input.warm);

    let soft = LeaderModel::new(input, TerminalMode::Soft);
    let warm_v = ShootingProblem::new(&soft, input.grid, x0.clone(), input.u_prev.clone())
        .rollout(&z0)
        .ok()
        .and_then(|xs| soft.terminal_value(xs.last().expect("rollout has K+1 nodes")).ok());
    let try_hard = input.previous_mode == Some(TerminalMode::Hard)
        || warm_v.is_some_and(|v| v <= s.hard_entry_factor * s.terminal_eps);

    if try_hard {
        let hard = LeaderModel::new(input, TerminalMode::Hard);
        match solve_mode(&hard, input, &x0, &z0) {
            Ok(sol) if sol.max_violation <= MONITOR_TOL => return Ok(sol),
            Ok(sol) => debug!(target: "fhocp", "hard terminal infeasible ({:.3e}), falling back", sol.max_violation),
            Err(e) => debug!(target: "fhocp", "hard terminal solve failed: {e}"),
        }
    }
    solve_mode(&soft, input, &x0, &z0)
}

fn solve_mode(
    model: &LeaderModel<'_>,
    input: &LeaderInput<'_>,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<HorizonSolution, FhocpError> {
    let problem = ShootingProblem::new(model, input.grid, x0.clone(), input.u_prev.clone());
    let res = solve(&problem, z0, &input.settings.sqp)?;
    let states = problem.rollout(&res.z)?;
    let first_stage_cost = problem.stage_cost(&res.z, &states, 0)?;
    let (object_poses, object_twists) = object_path(input.agent, &states)?;
    let status = if res.max_violation > MONITOR_TOL {
        SolveStatus::Infeasible
    } else if res.status == SqpStatus::Converged && res.max_violation <= input.settings.sqp.feas_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::Degraded
    };
    debug!(
        target: "fhocp",
        "leader {} solve: cost {:.6e}, {} its, kkt {:.2e}, viol {:.2e}",
        model.mode.as_str(),
        res.eval.objective,
        res.iterations,
        res.kkt,
        res.max_violation
    );
    Ok(HorizonSolution {
        controls: problem.unstack(&res.z),
        states,
        object_poses,
        object_twists,
        cost: res.eval.objective,
        status,
        iterations: res.iterations,
        kkt: res.kkt,
        max_violation: res.max_violation,
        worst_constraint: problem.worst_constraint(&res.z, &res.eval.ineq),
        terminal_mode: Some(model.mode),
        first_stage_cost,
        tracking_error: None,
        used_elastic: res.used_elastic,
    })
}
