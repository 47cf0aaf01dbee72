//! Scenario description with units in field names, and its translation into
//! model parameters.

use cotrans_core::agent::{AgentParams, AgentState, AttachedEllipsoid, Frame, GraspOffset, JointBox};
use cotrans_core::coupled::equilibrium_input;
use cotrans_core::object::{calibrate_grasp, ObjectParams, ObjectPose};
use cotrans_core::spatial::{Ellipsoid, EulerAngles};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fhocp::{FollowerSettings, HorizonGrid, InputCost, LeaderSettings};
use crate::sqp::SqpOptions;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid scenario: {invariant}: {detail}")]
pub struct ConfigError {
    /// Short name of the violated invariant, such as `load_share_sum`.
    pub invariant: &'static str,
    pub detail: String,
}

fn invalid<T>(invariant: &'static str, detail: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { invariant, detail: detail.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub position_m: [f64; 3],
    /// x-y-z Euler angles `(phi, theta, psi)`.
    pub orientation_rad: [f64; 3],
}

impl PoseConfig {
    pub fn to_pose(&self) -> ObjectPose<f64> {
        let [x, y, z] = self.position_m;
        let [a, b, c] = self.orientation_rad;
        ObjectPose::new(Vector3::new(x, y, z), EulerAngles::new(a, b, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub mass_kg: f64,
    /// The object is a uniform solid sphere.
    pub radius_m: f64,
    pub initial: PoseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torque_norm_bound_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torque_rate_bound_nm_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_rate_bound_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm_rate_bound_rad_per_s: Option<f64>,
    #[serde(default = "default_tilt")]
    pub tilt_max_rad: f64,
    pub singularity_floor: f64,
    /// `[lower, upper]` per arm joint.
    #[serde(default)]
    pub joint_boxes_rad: Vec<[f64; 2]>,
}

fn default_tilt() -> f64 {
    1.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspConfig {
    /// Object center in the end-effector frame.
    pub position_m: [f64; 3],
    pub orientation_rad: [f64; 3],
}

/// Planar vehicle with a two-link arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub link_lengths_m: [f64; 2],
    pub base_height_m: f64,
    pub base_mass_kg: f64,
    pub link_mass_kg: f64,
    pub load_share: f64,
    /// `[x, y, alpha1, alpha2]`.
    pub initial_q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_qdot: Option<Vec<f64>>,
    /// Bounding sphere around the vehicle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_radius_m: Option<f64>,
    pub limits: LimitsConfig,
    /// Calibrated from the initial configuration and object pose when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp: Option<GraspConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub center_m: [f64; 3],
    pub radius_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputCostConfig {
    Absolute,
    GravityCompensated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderConfig {
    /// Diagonal of `Q` (error dimension).
    pub q_diag: Vec<f64>,
    /// Diagonal of `R` (input dimension).
    pub r_diag: Vec<f64>,
    /// Diagonal of `P`.
    pub p_diag: Vec<f64>,
    pub terminal_level: f64,
    pub soft_terminal_weight: f64,
    pub hard_entry_factor: f64,
    /// Share of each input and rate bound the leader plans against.
    #[serde(default = "unit")]
    pub limit_scale: f64,
    pub input_cost: InputCostConfig,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerConfig {
    pub input_weight: f64,
    pub rate_weight: f64,
    pub penalties: Vec<f64>,
    pub match_tol_m: f64,
    pub degraded_tol_m: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    /// Singularity floor inside prediction rollouts.
    pub prediction_floor: f64,
    pub prediction_substeps: usize,
    pub plant_substeps: usize,
    /// Stop early once `‖e₁‖` falls below this value.
    pub stop_error: f64,
    /// Solver stops once the step is below this, relative to the iterate.
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
}

fn unit() -> f64 {
    1.0
}

fn default_step_tol() -> f64 {
    1e-6
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            prediction_floor: 1e-8,
            prediction_substeps: 2,
            plant_substeps: 4,
            stop_error: 1e-9,
            step_tol: default_step_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub sampling_period_s: f64,
    pub horizon_s: f64,
    pub total_time_s: f64,
    pub workspace_radius_m: f64,
    pub object: ObjectConfig,
    pub goal: PoseConfig,
    /// Priority order: the first agent leads.
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    pub leader: LeaderConfig,
    pub follower: FollowerConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
}

/// Everything the controller and plant need, built from a [`ScenarioConfig`].
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub team: Vec<AgentParams<f64>>,
    pub object: ObjectParams<f64>,
    pub obstacles: Vec<Ellipsoid<f64>>,
    pub x_des: ObjectPose<f64>,
    pub grid: HorizonGrid,
    pub leader: LeaderSettings,
    pub follower: FollowerSettings,
    pub initial: Vec<AgentState<f64>>,
}

impl Scenario {
    pub fn steps(&self) -> usize {
        (self.config.total_time_s / self.grid.h).round() as usize
    }
}

fn positive(name: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid("positive_bound", format!("{name} must be positive, got {v}"))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build().map(|_| ())
    }

    pub fn build(&self) -> Result<Scenario, ConfigError> {
        positive("sampling_period_s", self.sampling_period_s)?;
        positive("horizon_s", self.horizon_s)?;
        positive("total_time_s", self.total_time_s)?;
        positive("workspace_radius_m", self.workspace_radius_m)?;
        if self.horizon_s <= self.sampling_period_s * (1.0 - 1e-12) {
            return invalid("horizon_grid", "the horizon must exceed the sampling period");
        }
        let mut grid = HorizonGrid::new(self.sampling_period_s, self.horizon_s)
            .or_else(|e| invalid("horizon_grid", e.to_string()))?;
        grid.substeps = self.numerics.prediction_substeps.max(1);
        let steps = self.total_time_s / self.sampling_period_s;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return invalid("total_time_grid", "total time must be a multiple of the sampling period");
        }
        if self.numerics.plant_substeps == 0 {
            return invalid("positive_bound", "plant_substeps must be at least 1");
        }
        if self.agents.is_empty() {
            return invalid("team_size", "at least one agent is required");
        }
        let share: f64 = self.agents.iter().map(|a| a.load_share).sum();
        if (share - 1.0).abs() > 1e-9 {
            return invalid("load_share_sum", format!("load shares sum to {share}, expected 1"));
        }

        positive("object.mass_kg", self.object.mass_kg)?;
        positive("object.radius_m", self.object.radius_m)?;
        let object = ObjectParams::solid_sphere(self.object.mass_kg, self.object.radius_m);
        let start = self.object.initial.to_pose();
        let x_des = self.goal.to_pose();
        for (name, p) in [("object.initial", &start), ("goal", &x_des)] {
            if p.p.norm() > self.workspace_radius_m {
                return invalid("inside_workspace", format!("{name} lies outside the workspace"));
            }
            if !p.eta.in_domain() {
                return invalid("euler_domain", format!("{name} pitch must lie in (-pi/2, pi/2)"));
            }
        }

        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for (k, o) in self.obstacles.iter().enumerate() {
            positive("obstacle radius_m", o.radius_m)?;
            let c = Vector3::from(o.center_m);
            if c.norm() + o.radius_m > self.workspace_radius_m {
                return invalid("inside_workspace", format!("obstacle {k} is not inside the workspace"));
            }
            obstacles.push(Ellipsoid::sphere(c, o.radius_m));
        }

        let mut team = Vec::with_capacity(self.agents.len());
        let mut initial = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter().enumerate() {
            let (params, state) = build_agent(i, a, &start)?;
            team.push(params);
            initial.push(state);
        }

        let task = team[0].task_dim();
        let l = &self.leader;
        if l.q_diag.len() != 2 * task || l.p_diag.len() != 2 * task || l.r_diag.len() != task {
            return invalid(
                "gain_dimensions",
                format!("Q and P need {} diagonal entries and R needs {task}", 2 * task),
            );
        }
        let leader = LeaderSettings {
            q: DMatrix::from_diagonal(&DVector::from_vec(l.q_diag.clone())),
            r: DMatrix::from_diagonal(&DVector::from_vec(l.r_diag.clone())),
            p: DMatrix::from_diagonal(&DVector::from_vec(l.p_diag.clone())),
            terminal_eps: l.terminal_level,
            soft_terminal_weight: l.soft_terminal_weight,
            hard_entry_factor: l.hard_entry_factor,
            input_cost: match l.input_cost {
                InputCostConfig::Absolute => InputCost::Absolute,
                InputCostConfig::GravityCompensated => InputCost::GravityCompensated,
            },
            limit_scale: l.limit_scale,
            prediction_floor: self.numerics.prediction_floor,
            sqp: SqpOptions {
                max_iterations: l.max_iterations,
                step_tol: self.numerics.step_tol,
                ..SqpOptions::default()
            },
        };
        leader.validate(2 * task, task).or_else(|e| invalid("leader_gains", e.to_string()))?;
        if let Some(bound) = team[0].limits.input_box {
            let hold = equilibrium_input(&team[0], &object, &initial[0].q)
                .or_else(|e| invalid("leader_limit_scale", e.to_string()))?
                .amax();
            if hold > l.limit_scale * bound {
                return invalid(
                    "leader_limit_scale",
                    format!(
                        "holding the leader still needs {hold:.3}, above the planned bound {:.3}",
                        l.limit_scale * bound
                    ),
                );
            }
        }

        let f = &self.follower;
        if f.penalties.is_empty() || f.penalties.iter().any(|p| !(*p > 0.0)) {
            return invalid("follower_penalties", "penalty schedule must be non-empty and positive");
        }
        if !(f.input_weight >= 0.0 && f.rate_weight >= 0.0) {
            return invalid("follower_weights", "follower weights must be non-negative");
        }
        positive("match_tol_m", f.match_tol_m)?;
        if !(f.degraded_tol_m >= f.match_tol_m) {
            return invalid("follower_tolerances", "degraded tolerance must not be below the match tolerance");
        }
        let follower = FollowerSettings {
            input_weight: f.input_weight,
            rate_weight: f.rate_weight,
            penalties: f.penalties.clone(),
            match_tol: f.match_tol_m,
            degraded_tol: f.degraded_tol_m,
            prediction_floor: self.numerics.prediction_floor,
            sqp: SqpOptions {
                max_iterations: f.max_iterations,
                step_tol: self.numerics.step_tol,
                ..SqpOptions::default()
            },
        };
        positive("prediction_floor", self.numerics.prediction_floor)?;
        positive("step_tol", self.numerics.step_tol)?;

        Ok(Scenario { config: self.clone(), team, object, obstacles, x_des, grid, leader, follower, initial })
    }
}

fn build_agent(
    i: usize,
    a: &AgentConfig,
    start: &ObjectPose<f64>,
) -> Result<(AgentParams<f64>, AgentState<f64>), ConfigError> {
    let [l1, l2] = a.link_lengths_m;
    positive("link_lengths_m", l1)?;
    positive("link_lengths_m", l2)?;
    positive("base_mass_kg", a.base_mass_kg)?;
    if !(a.link_mass_kg >= 0.0) {
        return invalid("positive_bound", format!("agent {i}: link mass must be non-negative"));
    }
    if !(a.load_share > 0.0 && a.load_share <= 1.0) {
        return invalid("load_share_range", format!("agent {i}: load share must lie in (0, 1]"));
    }
    let mut p = AgentParams::planar_two_link(l1, l2, a.base_height_m, a.base_mass_kg, a.link_mass_kg);
    p.load_share = a.load_share;
    if let Some(r) = a.base_radius_m {
        positive("base_radius_m", r)?;
        p.ellipsoids.push(AttachedEllipsoid { frame: Frame::Base, local: Ellipsoid::sphere(Vector3::zeros(), r) });
    }
    let lim = &a.limits;
    for (name, v) in [
        ("input_bound", lim.input_bound),
        ("torque_norm_bound_nm", lim.torque_norm_bound_nm),
        ("torque_rate_bound_nm_per_s", lim.torque_rate_bound_nm_per_s),
        ("joint_rate_bound_per_s", lim.joint_rate_bound_per_s),
        ("arm_rate_bound_rad_per_s", lim.arm_rate_bound_rad_per_s),
    ] {
        if let Some(v) = v {
            positive(name, v)?;
        }
    }
    positive("singularity_floor", lim.singularity_floor)?;
    p.limits.input_box = lim.input_bound;
    p.limits.tau_max = lim.torque_norm_bound_nm;
    p.limits.tau_rate_max = lim.torque_rate_bound_nm_per_s;
    p.limits.qdot_max = lim.joint_rate_bound_per_s;
    p.limits.arm_rate_max = lim.arm_rate_bound_rad_per_s;
    p.limits.tilt_max = lim.tilt_max_rad;
    p.limits.singularity_floor = lim.singularity_floor;
    for (k, [lo, hi]) in lim.joint_boxes_rad.iter().enumerate() {
        if !(lo < hi) {
            return invalid("joint_box_order", format!("agent {i}: joint {k} box is empty"));
        }
        p.limits.joint_boxes.push(Some(JointBox { lower: *lo, upper: *hi }));
    }

    if a.initial_q.len() != p.dof() {
        return invalid("state_dimension", format!("agent {i}: initial_q needs {} entries", p.dof()));
    }
    let q = DVector::from_vec(a.initial_q.clone());
    let qdot = match &a.initial_qdot {
        Some(v) if v.len() != p.dof() => {
            return invalid("state_dimension", format!("agent {i}: initial_qdot needs {} entries", p.dof()))
        }
        Some(v) => DVector::from_vec(v.clone()),
        None => DVector::zeros(p.dof()),
    };
    p.grasp = match &a.grasp {
        Some(g) => GraspOffset {
            position: Vector3::from(g.position_m),
            orientation: EulerAngles::new(g.orientation_rad[0], g.orientation_rad[1], g.orientation_rad[2]),
        },
        None => calibrate_grasp(&p, &q, start).or_else(|e| invalid("grasp", format!("agent {i}: {e}")))?,
    };
    p.validate().or_else(|e| invalid("agent_params", format!("agent {i}: {e}")))?;
    Ok((p, AgentState::new(q, qdot)))
}
