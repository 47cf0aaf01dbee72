//! The transported rigid body: pose, twist, Newton-Euler terms and the
//! kinematic coupling between each grasping agent and the object.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};

use crate::agent::{forward_kinematics, AgentParams, Chain, GraspOffset, GRAVITY};
use crate::error::{ModelError, ModelResult};
use crate::real::Real;
use crate::spatial::{euler_rate_jacobian, euler_rate_jacobian_inverse, skew, Ellipsoid, EulerAngles};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectParams<T: Real> {
    pub mass: T,
    /// Inertia about the center of mass, body frame.
    pub inertia: Matrix3<T>,
    /// Bounding ellipsoid in the body frame.
    pub bounding: Ellipsoid<T>,
    pub gravity: T,
}

impl<T: Real> ObjectParams<T> {
    /// Uniform solid sphere that is its own bounding ellipsoid.
    pub fn solid_sphere(mass: T, radius: T) -> Self {
        let i = T::c(0.4) * mass * radius * radius;
        Self {
            mass,
            inertia: Matrix3::identity() * i,
            bounding: Ellipsoid::sphere(Vector3::zeros(), radius),
            gravity: T::c(GRAVITY),
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        if !(self.mass > T::zero()) {
            return Err(ModelError::InvalidParams("object mass must be positive".into()));
        }
        let sym = (self.inertia - self.inertia.transpose()).amax() <= T::tol(1e-12) * self.inertia.amax().max(T::one());
        if !sym || self.inertia.cholesky().is_none() {
            return Err(ModelError::InvalidParams("object inertia must be symmetric positive definite".into()));
        }
        self.bounding.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose<T: Real> {
    pub p: Vector3<T>,
    pub eta: EulerAngles<T>,
}

impl<T: Real> ObjectPose<T> {
    pub fn new(p: Vector3<T>, eta: EulerAngles<T>) -> Self {
        Self { p, eta }
    }

    /// `[p; phi; theta; psi]`.
    pub fn to_vector(&self) -> Vector6<T> {
        Vector6::new(self.p.x, self.p.y, self.p.z, self.eta.phi, self.eta.theta, self.eta.psi)
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), EulerAngles::new(v[3], v[4], v[5]))
    }

    /// Selected entries of [`ObjectPose::to_vector`].
    pub fn reduced(&self, rows: &[usize]) -> DVector<T> {
        let v = self.to_vector();
        DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]))
    }

    pub fn rotation(&self) -> Matrix3<T> {
        self.eta.rotation()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectTwist<T: Real> {
    pub v: Vector3<T>,
    pub omega: Vector3<T>,
}

impl<T: Real> ObjectTwist<T> {
    pub fn zero() -> Self {
        Self { v: Vector3::zeros(), omega: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> Vector6<T> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.omega.x, self.omega.y, self.omega.z)
    }

    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self { v: Vector3::new(v[0], v[1], v[2]), omega: Vector3::new(v[3], v[4], v[5]) }
    }

    pub fn reduced(&self, rows: &[usize]) -> DVector<T> {
        let v = self.to_vector();
        DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDynamics<T: Real> {
    pub m: Matrix6<T>,
    pub c: Matrix6<T>,
    pub g: Vector6<T>,
    /// `diag(I, J_B(eta_O))`.
    pub j_or: Matrix6<T>,
}

/// `(M_O, C_O, g_O, J_Or)`. `C_O` is chosen so that `Ṁ_O - 2 C_O` is antisymmetric.
pub fn object_dynamics_terms<T: Real>(
    params: &ObjectParams<T>,
    pose: &ObjectPose<T>,
    twist: &ObjectTwist<T>,
) -> ModelResult<ObjectDynamics<T>> {
    // Fails at theta = ±pi/2.
    euler_rate_jacobian_inverse(&pose.eta)?;
    let r = pose.rotation();
    let iw = r * params.inertia * r.transpose();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * params.mass));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&iw);
    let sw = skew(&twist.omega);
    let half = T::c(0.5);
    let c_ang = (sw * iw - iw * sw - skew(&(iw * twist.omega))) * half;
    let mut c = Matrix6::zeros();
    c.fixed_view_mut::<3, 3>(3, 3).copy_from(&c_ang);
    let mut g = Vector6::zeros();
    g[2] = params.mass * params.gravity;
    let mut j_or = Matrix6::identity();
    j_or.fixed_view_mut::<3, 3>(3, 3).copy_from(&euler_rate_jacobian(&pose.eta));
    Ok(ObjectDynamics { m, c, g, j_or })
}

/// `J_Or⁻¹`.
pub fn representation_jacobian_inverse<T: Real>(eta: &EulerAngles<T>) -> ModelResult<Matrix6<T>> {
    let inv = euler_rate_jacobian_inverse(eta)?;
    let mut out = Matrix6::identity();
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&inv);
    Ok(out)
}

/// Object pose through agent `i`'s chain and its grasp offset.
pub fn object_pose_from_agent<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<ObjectPose<T>> {
    let fk = forward_kinematics(params, q)?;
    Ok(ObjectPose::new(fk.p_e + fk.rotation * params.grasp.position, fk.eta_e + params.grasp.orientation))
}

/// Full 6-D end-effector twist `[v_E; omega_E]`.
pub fn end_effector_twist<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<Vector6<T>> {
    params.check_q(q)?;
    params.check_q(qdot)?;
    let chain = Chain::new(params, q);
    let j = chain.point_jacobian(params, Some(params.n_alpha() - 1), &chain.p_e);
    let v = j * qdot;
    Ok(Vector6::from_iterator(v.iter().copied()))
}

/// `v_O = J_iO v_E`.
pub fn object_twist_from_agent<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<ObjectTwist<T>> {
    let v_e = end_effector_twist(params, q, qdot)?;
    let (j_io, _) = coupling_jacobians(params, q)?;
    Ok(ObjectTwist::from_vector(&(j_io * v_e)))
}

/// `p_{E/O} = p_E - p_O` in the world frame.
pub fn grasp_lever<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<Vector3<T>> {
    let fk = forward_kinematics(params, q)?;
    Ok(-(fk.rotation * params.grasp.position))
}

/// `(J_iO, J_Oi)` for a given lever arm `p_{E/O}`.
pub fn coupling_from_lever<T: Real>(lever: &Vector3<T>) -> (Matrix6<T>, Matrix6<T>) {
    let s = skew(lever);
    let mut j_io = Matrix6::identity();
    j_io.fixed_view_mut::<3, 3>(0, 3).copy_from(&s);
    let mut j_oi = Matrix6::identity();
    j_oi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-s));
    (j_io, j_oi)
}

/// `(J_iO, J_Oi)` with `J_Oi = J_iO⁻¹` in closed form.
pub fn coupling_jacobians<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<(Matrix6<T>, Matrix6<T>)> {
    Ok(coupling_from_lever(&grasp_lever(params, q)?))
}

/// `d/dt J_iO`: the lever arm rotates with the grasp at `omega`.
pub fn coupling_jacobian_dot<T: Real>(lever: &Vector3<T>, omega: &Vector3<T>) -> Matrix6<T> {
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&omega.cross(lever)));
    out
}

/// `G(q)` (6N x 6) with block `i` equal to `J_Oi`, so that
/// `Gᵀ λ = sum_i J_Oiᵀ λ_i` is the object wrench.
pub fn grasp_matrix<T: Real>(agents: &[AgentParams<T>], qs: &[DVector<T>]) -> ModelResult<DMatrix<T>> {
    if agents.len() != qs.len() {
        return Err(ModelError::Dimension("one configuration per agent is required".into()));
    }
    let mut g = DMatrix::zeros(6 * agents.len(), 6);
    for (k, (a, q)) in agents.iter().zip(qs).enumerate() {
        let (_, j_oi) = coupling_jacobians(a, q)?;
        g.fixed_view_mut::<6, 6>(6 * k, 0).copy_from(&j_oi);
    }
    Ok(g)
}

/// Grasp offset that makes agent configuration `q` hold the object at `pose`.
pub fn calibrate_grasp<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    pose: &ObjectPose<T>,
) -> ModelResult<GraspOffset<T>> {
    let fk = forward_kinematics(params, q)?;
    Ok(GraspOffset {
        position: fk.rotation.transpose() * (pose.p - fk.p_e),
        orientation: EulerAngles::new(
            pose.eta.phi - fk.eta_e.phi,
            pose.eta.theta - fk.eta_e.theta,
            pose.eta.psi - fk.eta_e.psi,
        ),
    })
}

/// Object bounding ellipsoid in the world.
pub fn object_ellipsoid<T: Real>(params: &ObjectParams<T>, pose: &ObjectPose<T>) -> Ellipsoid<T> {
    params.bounding.transformed(&pose.p, &pose.rotation())
}
