mod common;

use common::*;
use cotrans_core::agent::{AttachedEllipsoid, Frame, JointBox};
use cotrans_core::constraints::{
    feasibility_report, input_residuals, state_residuals, terminal_membership, Neighbor, ResidualLabel, Side,
    StateContext, TerminalSetParams,
};
use cotrans_core::spatial::Ellipsoid;
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;

fn limited() -> cotrans_core::AgentParams64 {
    let mut a = team()[0].clone();
    a.limits.input_box = Some(8.5);
    a.limits.tau_max = Some(20.0);
    a.limits.tau_rate_max = Some(50.0);
    a.limits.qdot_max = Some(1.0);
    a.limits.arm_rate_max = Some(1.0);
    a.limits.singularity_floor = 0.002;
    a.limits.joint_boxes = vec![
        Some(JointBox { lower: 0.05, upper: FRAC_PI_2 - 0.05 }),
        Some(JointBox { lower: -FRAC_PI_2 + 0.05, upper: FRAC_PI_2 - 0.05 }),
    ];
    a.ellipsoids = vec![AttachedEllipsoid { frame: Frame::Base, local: Ellipsoid::sphere(Vector3::zeros(), 0.3) }];
    a
}

fn obstacle() -> Ellipsoid<f64> {
    Ellipsoid::sphere(Vector3::new(2.5, -2.2071, 1.0), 0.2f64.sqrt())
}

fn arm_state() -> impl Strategy<Value = (DVector<f64>, DVector<f64>)> {
    (proptest::collection::vec(-3.0..3.0f64, 2), 0.1..1.5f64, -1.5..1.5f64, proptest::collection::vec(-2.0..2.0f64, 4))
        .prop_map(|(xy, a1, a2, qd)| (DVector::from_vec(vec![xy[0], xy[1], a1, a2]), DVector::from_vec(qd)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn residuals_are_continuous((q, qd) in arm_state(), dq in proptest::collection::vec(-1.0..1.0f64, 4)) {
        let a = limited();
        let object = sphere_object();
        let obs = [obstacle()];
        let nb = [Neighbor { id: 1, ellipsoids: vec![Ellipsoid::sphere(Vector3::new(0.0, -4.4, 0.2), 0.3)] }];
        let ctx = StateContext { agent: &a, object: Some(&object), obstacles: &obs, neighbors: &nb };
        let dq = DVector::from_vec(dq) * 1e-7;
        let r0 = state_residuals(&ctx, &q, &qd).unwrap();
        let r1 = state_residuals(&ctx, &(&q + &dq), &(&qd + &dq)).unwrap();
        prop_assert_eq!(r0.len(), r1.len());
        for ((l0, v0), (l1, v1)) in r0.entries.iter().zip(&r1.entries) {
            prop_assert_eq!(l0, l1);
            prop_assert!((v0 - v1).abs() <= 1e-4 * v0.abs().max(1.0), "{} jumped from {} to {}", l0, v0, v1);
        }
    }

    #[test]
    fn input_box_residual_grows_with_magnitude(k in 0usize..4, s in 0.0..20.0f64) {
        let a = limited();
        let q = initial_configurations()[0].clone();
        let z = DVector::zeros(4);
        let value = |m: f64| {
            let mut u = DVector::zeros(4);
            u[k] = m;
            input_residuals(&a, &q, &z, &u, &z).unwrap()
        };
        let lo = value(s);
        let hi = value(s + 0.5);
        let label = ResidualLabel::InputBox { component: k, side: Side::Upper };
        prop_assert!(hi.get(label).unwrap() > lo.get(label).unwrap());
        prop_assert!(hi.get(ResidualLabel::TorqueNorm).unwrap() >= lo.get(ResidualLabel::TorqueNorm).unwrap());
    }

    #[test]
    fn obstacle_residual_grows_on_approach(t in 0.0..0.9f64) {
        let a = limited();
        let obs = [obstacle()];
        let ctx = StateContext { agent: &a, object: None, obstacles: &obs, neighbors: &[] };
        let start = Vector3::new(0.0, -2.2071, 0.2);
        let base_at = |s: f64| {
            let p = start + (obstacle().center - start) * s;
            DVector::from_vec(vec![p.x, p.y, 0.8, 0.4])
        };
        let label = ResidualLabel::AgentObstacle { ellipsoid: 0, obstacle: 0 };
        let r0 = state_residuals(&ctx, &base_at(t), &DVector::zeros(4)).unwrap().get(label).unwrap();
        let r1 = state_residuals(&ctx, &base_at(t + 0.05), &DVector::zeros(4)).unwrap().get(label).unwrap();
        prop_assert!(r1 >= r0);
    }

    #[test]
    fn terminal_residual_is_quadratic(e in proptest::collection::vec(-1.0..1.0f64, 8), s in 0.1..3.0f64) {
        let tp = TerminalSetParams { p: DMatrix::identity(8, 8) * 2.0, eps: 0.01 };
        let e = DVector::from_vec(e);
        let (_, r1) = terminal_membership(&tp, &e);
        let (_, r2) = terminal_membership(&tp, &(&e * s));
        prop_assert!(((r2 + 0.01) - s * s * (r1 + 0.01)).abs() <= 1e-12 * (r2.abs() + 1.0));
    }
}

#[test]
fn leader_labels_contain_follower_labels() {
    let a = limited();
    let object = sphere_object();
    let obs = [obstacle()];
    let q = initial_configurations()[0].clone();
    let qd = DVector::zeros(4);
    let leader = StateContext { agent: &a, object: Some(&object), obstacles: &obs, neighbors: &[] };
    let follower = StateContext { object: None, ..leader };
    let l: HashSet<ResidualLabel> = state_residuals(&leader, &q, &qd).unwrap().entries.iter().map(|e| e.0).collect();
    let f: HashSet<ResidualLabel> = state_residuals(&follower, &q, &qd).unwrap().entries.iter().map(|e| e.0).collect();
    assert!(f.is_subset(&l));
    let extra: Vec<_> = l.difference(&f).collect();
    assert!(extra.contains(&&ResidualLabel::ObjectObstacle { obstacle: 0 }));
    assert!(extra.contains(&&ResidualLabel::ObjectTilt(Side::Upper)));
}

#[test]
fn singular_configuration_is_reported() {
    let mut team = team();
    team[0].limits.singularity_floor = 0.002;
    let mut qs = initial_configurations().to_vec();
    qs[0][2] = 0.01;
    let report = feasibility_report(&team, &qs, &sphere_object(), &[obstacle()]).unwrap();
    assert_eq!(report.len(), 1);
    assert_eq!((report[0].0, report[0].1), (0, ResidualLabel::Singularity));
}

#[test]
fn overlapping_agents_are_reported_both_ways() {
    let mut team = team();
    for a in &mut team {
        a.ellipsoids = vec![AttachedEllipsoid { frame: Frame::Base, local: Ellipsoid::sphere(Vector3::zeros(), 0.3) }];
    }
    let mut qs = initial_configurations().to_vec();
    qs[2][0] = qs[1][0] - 0.4;
    let report = feasibility_report(&team, &qs, &sphere_object(), &[]).unwrap();
    let pairs: HashSet<usize> = report.iter().map(|r| r.0).collect();
    assert_eq!(pairs, [1, 2].into_iter().collect());
}

#[test]
fn invalid_terminal_weight_is_rejected() {
    let bad = TerminalSetParams { p: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])), eps: 0.01 };
    assert!(bad.validate().is_err());
    let zero = TerminalSetParams { p: DMatrix::identity(2, 2), eps: 0.0 };
    assert!(zero.validate().is_err());
}

#[test]
fn models_run_in_single_precision() {
    use cotrans_core::agent::{forward_kinematics, task_space_terms, AgentParams};
    use cotrans_core::coupled::forward_dynamics;
    use cotrans_core::object::ObjectParams;
    let a = AgentParams::<f32>::planar_two_link(1.0, 1.0, 0.2, 2.0, 0.1);
    let q = DVector::from_vec(vec![0.5f32, 0.0, 0.785, 0.785]);
    let fk = forward_kinematics(&a, &q).unwrap();
    assert!((fk.p_e.z - 0.2 - 0.785f32.cos() - 1.57f32.cos()).abs() < 1e-4);
    let ts = task_space_terms(&a, &q, &DVector::zeros(4)).unwrap();
    assert!(ts.m.clone().cholesky().is_some());
    let o = ObjectParams::<f32>::solid_sphere(1.0, 0.1);
    let state = cotrans_core::agent::AgentState::at_rest(q);
    let (_, qdd) = forward_dynamics(&a, &o, &state, &DVector::zeros(4)).unwrap();
    assert!(qdd.iter().all(|v| v.is_finite()));
}
