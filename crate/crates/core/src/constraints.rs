//! Constraint sets as residual vectors. A residual is satisfied when `<= 0`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::agent::{
    agent_ellipsoids, geometric_jacobian, jacobian_derivative, singularity_measure, AgentParams, BaseKind,
};
use crate::error::{ModelError, ModelResult};
use crate::object::{object_ellipsoid, object_pose_from_agent, ObjectParams};
use crate::real::Real;
use crate::spatial::{margin_unchecked, Ellipsoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualLabel {
    TorqueNorm,
    TorqueRateNorm,
    InputBox {
        component: usize,
        side: Side,
    },
    ObjectTilt(Side),
    BaseTilt(Side),
    JointRate {
        joint: usize,
        side: Side,
    },
    ArmRate,
    Singularity,
    JointAngle {
        joint: usize,
        side: Side,
    },
    AgentObstacle {
        ellipsoid: usize,
        obstacle: usize,
    },
    AgentAgent {
        other: usize,
        own: usize,
        theirs: usize,
    },
    ObjectObstacle {
        obstacle: usize,
    },
    /// Joint rate another agent needs to reproduce the planned object motion.
    FollowerJointRate {
        agent: usize,
        joint: usize,
        side: Side,
    },
    FollowerArmRate {
        agent: usize,
    },
    Terminal,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Lower => "lo",
            Side::Upper => "hi",
        })
    }
}

impl fmt::Display for ResidualLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResidualLabel::TorqueNorm => write!(f, "torque_norm"),
            ResidualLabel::TorqueRateNorm => write!(f, "torque_rate_norm"),
            ResidualLabel::InputBox { component, side } => write!(f, "input_box_{component}_{side}"),
            ResidualLabel::ObjectTilt(s) => write!(f, "object_tilt_{s}"),
            ResidualLabel::BaseTilt(s) => write!(f, "base_tilt_{s}"),
            ResidualLabel::JointRate { joint, side } => write!(f, "joint_rate_{joint}_{side}"),
            ResidualLabel::ArmRate => write!(f, "arm_rate"),
            ResidualLabel::FollowerJointRate { agent, joint, side } => {
                write!(f, "follower{agent}_joint_rate_{joint}_{side}")
            }
            ResidualLabel::FollowerArmRate { agent } => write!(f, "follower{agent}_arm_rate"),
            ResidualLabel::Singularity => write!(f, "singularity"),
            ResidualLabel::JointAngle { joint, side } => write!(f, "joint_angle_{joint}_{side}"),
            ResidualLabel::AgentObstacle { ellipsoid, obstacle } => {
                write!(f, "agent_obstacle_{ellipsoid}_{obstacle}")
            }
            ResidualLabel::AgentAgent { other, own, theirs } => {
                write!(f, "agent_agent_{other}_{own}_{theirs}")
            }
            ResidualLabel::ObjectObstacle { obstacle } => write!(f, "object_obstacle_{obstacle}"),
            ResidualLabel::Terminal => write!(f, "terminal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintResiduals<T: Real> {
    pub entries: Vec<(ResidualLabel, T)>,
}

impl<T: Real> ConstraintResiduals<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, label: ResidualLabel, value: T) {
        self.entries.push((label, value));
    }

    pub fn extend(&mut self, other: ConstraintResiduals<T>) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.entries.iter().map(|e| e.1)
    }

    pub fn get(&self, label: ResidualLabel) -> Option<T> {
        self.entries.iter().find(|e| e.0 == label).map(|e| e.1)
    }

    /// Largest residual, `None` when empty.
    pub fn max(&self) -> Option<(ResidualLabel, T)> {
        self.entries.iter().copied().fold(None, |acc: Option<(ResidualLabel, T)>, e| match acc {
            Some(a) if a.1 >= e.1 => Some(a),
            _ => Some(e),
        })
    }

    pub fn satisfied(&self, tol: T) -> bool {
        self.values().all(|v| v <= tol)
    }
}

/// `U_i`: torque norm, torque-rate norm and per-component input box, as
/// configured in the agent's limits.
pub fn input_residuals<T: Real>(
    agent: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
    u: &DVector<T>,
    udot: &DVector<T>,
) -> ModelResult<ConstraintResiduals<T>> {
    let mut r = ConstraintResiduals::new();
    let lim = &agent.limits;
    if u.len() != agent.task_dim() || udot.len() != agent.task_dim() {
        return Err(ModelError::Dimension("input size differs from task dimension".into()));
    }
    if lim.tau_max.is_some() || lim.tau_rate_max.is_some() {
        let j = geometric_jacobian(agent, q)?;
        if let Some(tmax) = lim.tau_max {
            r.push(ResidualLabel::TorqueNorm, (j.transpose() * u).norm() - tmax);
        }
        if let Some(rmax) = lim.tau_rate_max {
            let jd = jacobian_derivative(agent, q, qdot)?;
            r.push(ResidualLabel::TorqueRateNorm, (jd.transpose() * u + j.transpose() * udot).norm() - rmax);
        }
    }
    if let Some(b) = lim.input_box {
        for (k, &v) in u.iter().enumerate() {
            r.push(ResidualLabel::InputBox { component: k, side: Side::Upper }, v - b);
            r.push(ResidualLabel::InputBox { component: k, side: Side::Lower }, -v - b);
        }
    }
    Ok(r)
}

/// Bounding ellipsoids of another agent, tagged with its index.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<T: Real> {
    pub id: usize,
    pub ellipsoids: Vec<Ellipsoid<T>>,
}

/// What `state_residuals` checks an agent against.
#[derive(Debug, Clone, Copy)]
pub struct StateContext<'a, T: Real> {
    pub agent: &'a AgentParams<T>,
    /// Present for the leader only: adds object tilt and object-obstacle terms.
    pub object: Option<&'a ObjectParams<T>>,
    pub obstacles: &'a [Ellipsoid<T>],
    pub neighbors: &'a [Neighbor<T>],
}

/// `X_i`: tilt, joint-rate, arm-rate, singularity, joint boxes and collision
/// residuals at one state.
pub fn state_residuals<T: Real>(
    ctx: &StateContext<'_, T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<ConstraintResiduals<T>> {
    let agent = ctx.agent;
    agent.check_q(q)?;
    agent.check_q(qdot)?;
    let lim = &agent.limits;
    let mut r = ConstraintResiduals::new();

    if let Some(object) = ctx.object {
        let pose = object_pose_from_agent(agent, q)?;
        r.push(ResidualLabel::ObjectTilt(Side::Upper), pose.eta.theta - lim.tilt_max);
        r.push(ResidualLabel::ObjectTilt(Side::Lower), -pose.eta.theta - lim.tilt_max);
        let body = object_ellipsoid(object, &pose);
        for (z, obs) in ctx.obstacles.iter().enumerate() {
            r.push(ResidualLabel::ObjectObstacle { obstacle: z }, -margin_unchecked(&body, obs)?);
        }
    }
    if let BaseKind::Floating = agent.base {
        r.push(ResidualLabel::BaseTilt(Side::Upper), q[4] - lim.tilt_max);
        r.push(ResidualLabel::BaseTilt(Side::Lower), -q[4] - lim.tilt_max);
    }
    if let Some(vmax) = lim.qdot_max {
        for (k, &v) in qdot.iter().enumerate() {
            r.push(ResidualLabel::JointRate { joint: k, side: Side::Upper }, v - vmax);
            r.push(ResidualLabel::JointRate { joint: k, side: Side::Lower }, -v - vmax);
        }
    }
    if let Some(amax) = lim.arm_rate_max {
        r.push(ResidualLabel::ArmRate, agent.alpha(qdot).norm() - amax);
    }
    r.push(ResidualLabel::Singularity, lim.singularity_floor - singularity_measure(agent, q)?);
    let alpha = agent.alpha(q);
    for (k, b) in lim.joint_boxes.iter().enumerate() {
        if let Some(b) = b {
            r.push(ResidualLabel::JointAngle { joint: k, side: Side::Upper }, alpha[k] - b.upper);
            r.push(ResidualLabel::JointAngle { joint: k, side: Side::Lower }, b.lower - alpha[k]);
        }
    }
    let own = agent_ellipsoids(agent, q)?;
    for (e, a) in own.iter().enumerate() {
        for (z, obs) in ctx.obstacles.iter().enumerate() {
            r.push(ResidualLabel::AgentObstacle { ellipsoid: e, obstacle: z }, -margin_unchecked(a, obs)?);
        }
    }
    for nb in ctx.neighbors {
        for (e, a) in own.iter().enumerate() {
            for (t, b) in nb.ellipsoids.iter().enumerate() {
                r.push(ResidualLabel::AgentAgent { other: nb.id, own: e, theirs: t }, -margin_unchecked(a, b)?);
            }
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSetParams<T: Real> {
    pub p: DMatrix<T>,
    pub eps: T,
}

impl<T: Real> TerminalSetParams<T> {
    pub fn validate(&self) -> ModelResult<()> {
        if !(self.eps > T::zero()) {
            return Err(ModelError::InvalidParams("terminal level must be positive".into()));
        }
        let p = &self.p;
        if !p.is_square()
            || (p - p.transpose()).amax() > T::tol(1e-12) * p.amax().max(T::one())
            || p.clone().cholesky().is_none()
        {
            return Err(ModelError::InvalidParams("terminal weight must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

/// `(eᵀ P e <= eps, eᵀ P e - eps)`.
pub fn terminal_membership<T: Real>(tp: &TerminalSetParams<T>, e: &DVector<T>) -> (bool, T) {
    let v = e.dot(&(&tp.p * e));
    let r = v - tp.eps;
    (r <= T::zero(), r)
}

/// Pointwise membership of the current team configuration in the
/// collision-free, nonsingular set: joint boxes, singularity floor, base and
/// object tilt, agent-obstacle, agent-agent and object-obstacle separation.
/// The object pose is taken through agent 0.
pub fn feasibility_assumption_check<T: Real>(
    team: &[AgentParams<T>],
    qs: &[DVector<T>],
    object: &ObjectParams<T>,
    obstacles: &[Ellipsoid<T>],
) -> bool {
    feasibility_report(team, qs, object, obstacles).map_or(false, |v| v.is_empty())
}

/// Violated residuals per agent, empty when the configuration is admissible.
pub fn feasibility_report<T: Real>(
    team: &[AgentParams<T>],
    qs: &[DVector<T>],
    object: &ObjectParams<T>,
    obstacles: &[Ellipsoid<T>],
) -> ModelResult<Vec<(usize, ResidualLabel, T)>> {
    if team.len() != qs.len() || team.is_empty() {
        return Err(ModelError::Dimension("one configuration per agent is required".into()));
    }
    let ellipsoids: Vec<Vec<Ellipsoid<T>>> =
        team.iter().zip(qs).map(|(a, q)| agent_ellipsoids(a, q)).collect::<ModelResult<_>>()?;
    let mut out = Vec::new();
    for (i, (a, q)) in team.iter().zip(qs).enumerate() {
        let neighbors: Vec<Neighbor<T>> = ellipsoids
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != i)
            .map(|(l, e)| Neighbor { id: l, ellipsoids: e.clone() })
            .collect();
        let ctx = StateContext {
            agent: a,
            object: if i == 0 { Some(object) } else { None },
            obstacles,
            neighbors: &neighbors,
        };
        let zero = DVector::zeros(q.len());
        for (label, v) in state_residuals(&ctx, q, &zero)?.entries {
            if !(v < T::zero()) {
                out.push((i, label, v));
            }
        }
    }
    Ok(out)
}
