#![allow(dead_code)]

use cotrans_core::agent::{AgentParams, BaseKind, RevoluteJoint};
use cotrans_core::object::{calibrate_grasp, ObjectParams, ObjectPose};
use cotrans_core::spatial::EulerAngles;
use nalgebra::{DVector, Matrix3, Vector3};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

pub fn planar() -> AgentParams<f64> {
    AgentParams::planar_two_link(1.0, 1.0, 0.2, 2.0, 0.1)
}

/// Free-floating base with a 3-joint spatial arm.
pub fn floating() -> AgentParams<f64> {
    let joint = |axis: Vector3<f64>, offset: Vector3<f64>, mass: f64| RevoluteJoint {
        axis,
        offset,
        mass,
        com: offset * 0.4 + Vector3::new(0.01, -0.02, 0.0),
        inertia: Matrix3::new(0.02, 0.001, 0.0, 0.001, 0.03, 0.002, 0.0, 0.002, 0.01),
    };
    let mut a = AgentParams::planar_two_link(1.0, 1.0, 0.0, 3.0, 0.1);
    a.base = BaseKind::Floating;
    a.base_inertia = Matrix3::new(0.3, 0.01, 0.0, 0.01, 0.4, 0.02, 0.0, 0.02, 0.5);
    a.mount = Vector3::new(0.1, 0.0, 0.15);
    a.joints = vec![
        joint(Vector3::z(), Vector3::new(0.0, 0.0, 0.3), 0.4),
        joint(Vector3::y(), Vector3::new(0.5, 0.0, 0.0), 0.3),
        joint(Vector3::new(1.0, 1.0, 0.0).normalize(), Vector3::new(0.0, 0.1, 0.4), 0.2),
    ];
    a
}

pub fn sphere_object() -> ObjectParams<f64> {
    ObjectParams::solid_sphere(1.0, 0.1)
}

pub fn initial_object_pose() -> ObjectPose<f64> {
    ObjectPose::new(Vector3::new(0.0, -2.2071, 0.9071), EulerAngles::new(FRAC_PI_2, 0.0, 0.0))
}

pub fn initial_configurations() -> [DVector<f64>; 3] {
    [
        DVector::from_vec(vec![0.5, 0.0, FRAC_PI_4, FRAC_PI_4]),
        DVector::from_vec(vec![0.0, -4.4142, -FRAC_PI_4, -FRAC_PI_4]),
        DVector::from_vec(vec![-0.5, -4.4142, -FRAC_PI_4, -FRAC_PI_4]),
    ]
}

/// Three planar agents calibrated to hold the object at the initial pose.
pub fn team() -> Vec<AgentParams<f64>> {
    let pose = initial_object_pose();
    let shares = [0.3, 0.5, 0.2];
    initial_configurations()
        .iter()
        .zip(shares)
        .map(|(q, c)| {
            let mut a = planar();
            a.grasp = calibrate_grasp(&a, q, &pose).unwrap();
            a.load_share = c;
            a
        })
        .collect()
}

pub fn max_rel(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
