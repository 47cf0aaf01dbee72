//! Scenario configurations assembled in code.

use std::f64::consts::FRAC_PI_4;

use cotrans_nmpc::sim::{
    AgentConfig, FollowerConfig, InputCostConfig, LeaderConfig, LimitsConfig, NumericsConfig, ObjectConfig,
    ObstacleConfig, PoseConfig, ScenarioConfig,
};

pub const START: [f64; 3] = [0.0, -2.2071, 0.9071];
pub const OBSTACLE: [f64; 3] = [2.5, -2.2071, 1.0];
const UPRIGHT: [f64; 3] = [std::f64::consts::FRAC_PI_2, 0.0, 0.0];
const MARGIN: f64 = 0.05;

fn agent(load_share: f64, q: [f64; 4], first_joint: [f64; 2]) -> AgentConfig {
    let half = std::f64::consts::FRAC_PI_2 - MARGIN;
    AgentConfig {
        link_lengths_m: [1.0, 1.0],
        base_height_m: 0.2,
        base_mass_kg: 2.0,
        link_mass_kg: 0.1,
        load_share,
        initial_q: q.to_vec(),
        initial_qdot: None,
        base_radius_m: Some(0.2),
        limits: LimitsConfig {
            input_bound: Some(8.5),
            torque_norm_bound_nm: None,
            torque_rate_bound_nm_per_s: None,
            joint_rate_bound_per_s: Some(1.0),
            arm_rate_bound_rad_per_s: Some(1.0),
            tilt_max_rad: 1.4,
            singularity_floor: 0.002,
            joint_boxes_rad: vec![first_joint, [-half, half]],
        },
        grasp: None,
    }
}

fn upper() -> [f64; 2] {
    [MARGIN, std::f64::consts::FRAC_PI_2 - MARGIN]
}

fn lower() -> [f64; 2] {
    [-std::f64::consts::FRAC_PI_2 + MARGIN, -MARGIN]
}

/// Three-agent team carrying the object 5 m along x past one obstacle.
pub fn three_agents() -> ScenarioConfig {
    ScenarioConfig {
        name: "three_agents".into(),
        seed: 0,
        sampling_period_s: 0.1,
        horizon_s: 0.5,
        total_time_s: 60.0,
        workspace_radius_m: 10.0,
        object: ObjectConfig {
            mass_kg: 1.0,
            radius_m: 0.1,
            initial: PoseConfig { position_m: START, orientation_rad: UPRIGHT },
        },
        goal: PoseConfig { position_m: [5.0, START[1], START[2]], orientation_rad: UPRIGHT },
        agents: vec![
            agent(0.3, [0.5, 0.0, FRAC_PI_4, FRAC_PI_4], upper()),
            agent(0.5, [0.0, -4.4142, -FRAC_PI_4, -FRAC_PI_4], lower()),
            agent(0.2, [-0.5, -4.4142, -FRAC_PI_4, -FRAC_PI_4], lower()),
        ],
        obstacles: vec![ObstacleConfig { center_m: OBSTACLE, radius_m: 0.2f64.sqrt() }],
        leader: LeaderConfig {
            q_diag: vec![0.5; 8],
            r_diag: vec![0.5; 4],
            p_diag: vec![0.5; 8],
            terminal_level: 1e-6,
            soft_terminal_weight: 100.0,
            hard_entry_factor: 4.0,
            limit_scale: 0.6,
            input_cost: InputCostConfig::GravityCompensated,
            max_iterations: 30,
        },
        follower: FollowerConfig {
            input_weight: 1e-3,
            rate_weight: 1e-3,
            penalties: vec![1e4, 1e6, 1e8],
            match_tol_m: 1e-4,
            degraded_tol_m: 1e-2,
            max_iterations: 30,
        },
        numerics: NumericsConfig { step_tol: 1e-9, ..NumericsConfig::default() },
    }
}

/// The leader of [`three_agents`] alone with a lighter object and its full
/// input range.
pub fn single_agent() -> ScenarioConfig {
    let mut c = three_agents();
    c.name = "single_agent".into();
    c.agents.truncate(1);
    c.agents[0].load_share = 1.0;
    c.leader.limit_scale = 1.0;
    c.object.mass_kg = 0.5;
    c.obstacles.clear();
    c.goal.position_m = [0.5, START[1], START[2]];
    c
}
