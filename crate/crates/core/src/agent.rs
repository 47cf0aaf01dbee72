//! Mobile-base manipulators: configuration layout, forward kinematics,
//! geometric Jacobians, joint- and task-space dynamics and the input map.
//!
//! An agent is a base (planar vehicle at fixed height, or a free-floating body
//! parameterised by position and x-y-z Euler angles) carrying a serial chain of
//! revolute joints. Joint `j` rotates link `j` about `axis` (expressed in the
//! frame of link `j - 1`); `offset` locates the next joint, or the end-effector
//! for the last link, in the frame of link `j`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{ModelError, ModelResult};
use crate::real::Real;
use crate::spatial::{euler_rate_jacobian, rot_axis, skew, Ellipsoid, EulerAngles};

/// Gravity along `-z`.
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseKind<T: Real> {
    /// `q = [x, y, alpha...]`; base at constant height with identity
    /// orientation. Task vector `(x_E, y_E, z_E, phi_E)`. Joint axes must be ±x.
    Planar { height: T },
    /// `q = [p_B, eta_B, alpha...]`; full 6-D task vector.
    Floating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevoluteJoint<T: Real> {
    pub axis: Vector3<T>,
    pub offset: Vector3<T>,
    pub mass: T,
    pub com: Vector3<T>,
    pub inertia: Matrix3<T>,
}

impl<T: Real> RevoluteJoint<T> {
    /// Uniform thin rod of length `‖offset‖` lying along `offset`.
    pub fn rod(axis: Vector3<T>, offset: Vector3<T>, mass: T) -> Self {
        let len = offset.norm();
        let k = mass * len * len / T::c(12.0);
        let dir = if len > T::zero() { offset / len } else { Vector3::z() };
        let inertia = (Matrix3::identity() - dir * dir.transpose()) * k;
        Self { axis, offset, mass, com: offset * T::c(0.5), inertia }
    }
}

/// Body frame a bounding ellipsoid moves with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Base,
    /// Link `j`, zero-based.
    Link(usize),
    EndEffector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttachedEllipsoid<T: Real> {
    pub frame: Frame,
    /// Center and shape expressed in `frame`.
    pub local: Ellipsoid<T>,
}

/// Constant pose of the object relative to the end-effector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspOffset<T: Real> {
    /// `p^E_{O/E}`: object center in the end-effector frame.
    pub position: Vector3<T>,
    /// `eta_{O/E}`.
    pub orientation: EulerAngles<T>,
}

impl<T: Real> GraspOffset<T> {
    pub fn identity() -> Self {
        Self { position: Vector3::zeros(), orientation: EulerAngles::zero() }
    }
}

/// Lower and upper bound of one arm joint angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointBox<T: Real> {
    pub lower: T,
    pub upper: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentLimits<T: Real> {
    /// `‖Jᵀu‖ <= tau_max`.
    pub tau_max: Option<T>,
    /// `‖J̇ᵀu + Jᵀu̇‖ <= tau_rate_max`.
    pub tau_rate_max: Option<T>,
    /// `|u_j| <= input_box`.
    pub input_box: Option<T>,
    /// `|q̇_k| <= qdot_max`.
    pub qdot_max: Option<T>,
    /// `‖α̇‖ <= arm_rate_max`.
    pub arm_rate_max: Option<T>,
    /// Bound on base (and, for the leader, object) pitch.
    pub tilt_max: T,
    /// `det(J Jᵀ) >= singularity_floor`.
    pub singularity_floor: T,
    /// Optional per-arm-joint angle boxes.
    pub joint_boxes: Vec<Option<JointBox<T>>>,
}

impl<T: Real> Default for AgentLimits<T> {
    fn default() -> Self {
        Self {
            tau_max: None,
            tau_rate_max: None,
            input_box: None,
            qdot_max: None,
            arm_rate_max: None,
            tilt_max: T::c(1.4),
            singularity_floor: T::c(1e-3),
            joint_boxes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams<T: Real> {
    pub base: BaseKind<T>,
    pub base_mass: T,
    /// Base inertia about its center, base frame. Unused for planar bases.
    pub base_inertia: Matrix3<T>,
    /// First joint location in the base frame.
    pub mount: Vector3<T>,
    pub joints: Vec<RevoluteJoint<T>>,
    pub ellipsoids: Vec<AttachedEllipsoid<T>>,
    pub grasp: GraspOffset<T>,
    /// Load-sharing coefficient `c_i`.
    pub load_share: T,
    pub limits: AgentLimits<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState<T: Real> {
    pub q: DVector<T>,
    pub qdot: DVector<T>,
}

impl<T: Real> AgentState<T> {
    pub fn new(q: DVector<T>, qdot: DVector<T>) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: DVector<T>) -> Self {
        let n = q.len();
        Self { q, qdot: DVector::zeros(n) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndEffectorPose<T: Real> {
    pub p_e: Vector3<T>,
    /// `eta_B + k_eta(alpha)`.
    pub eta_e: EulerAngles<T>,
    /// `R_B R_A(alpha)`.
    pub rotation: Matrix3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpaceTerms<T: Real> {
    pub b: DMatrix<T>,
    pub n: DMatrix<T>,
    pub g: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpaceTerms<T: Real> {
    pub m: DMatrix<T>,
    /// `C_i`, task-dim square.
    pub c: DMatrix<T>,
    pub g: DVector<T>,
    pub j: DMatrix<T>,
    pub jdot: DMatrix<T>,
    /// `M_i (J B⁻¹ N - J̇)`, so that `C_i J q̇ = cj q̇`.
    pub cj: DMatrix<T>,
}

impl<T: Real> AgentParams<T> {
    /// Planar vehicle at `height` carrying a two-link arm in the y-z plane.
    /// Both joints rotate about `x`; with zero angles the arm points straight
    /// up, and link `k` points along `(0, -sin, cos)` of its absolute angle.
    pub fn planar_two_link(l1: T, l2: T, height: T, base_mass: T, link_mass: T) -> Self {
        let x = Vector3::x();
        Self {
            base: BaseKind::Planar { height },
            base_mass,
            base_inertia: Matrix3::identity() * base_mass * T::c(0.1),
            mount: Vector3::zeros(),
            joints: vec![
                RevoluteJoint::rod(x, Vector3::new(T::zero(), T::zero(), l1), link_mass),
                RevoluteJoint::rod(x, Vector3::new(T::zero(), T::zero(), l2), link_mass),
            ],
            ellipsoids: Vec::new(),
            grasp: GraspOffset::identity(),
            load_share: T::one(),
            limits: AgentLimits::default(),
        }
    }

    pub fn n_alpha(&self) -> usize {
        self.joints.len()
    }

    /// Number of base coordinates in `q`.
    pub fn base_dofs(&self) -> usize {
        match self.base {
            BaseKind::Planar { .. } => 2,
            BaseKind::Floating => 6,
        }
    }

    /// `n_i`.
    pub fn dof(&self) -> usize {
        self.base_dofs() + self.n_alpha()
    }

    pub fn task_dim(&self) -> usize {
        match self.base {
            BaseKind::Planar { .. } => 4,
            BaseKind::Floating => 6,
        }
    }

    /// Rows of a 6-D twist/wrench that form the task vector.
    pub fn task_rows(&self) -> &'static [usize] {
        match self.base {
            BaseKind::Planar { .. } => &[0, 1, 2, 3],
            BaseKind::Floating => &[0, 1, 2, 3, 4, 5],
        }
    }

    /// Arm angles out of `q`.
    pub fn alpha<'a>(&self, q: &'a DVector<T>) -> nalgebra::DVectorView<'a, T> {
        q.rows(self.base_dofs(), self.n_alpha())
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.joints.is_empty() {
            return Err(ModelError::InvalidParams("agent needs at least one arm joint".into()));
        }
        if !(self.base_mass > T::zero()) {
            return Err(ModelError::InvalidParams("base mass must be positive".into()));
        }
        let unit_tol = T::tol(1e-9);
        for (k, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - T::one()).abs() > unit_tol {
                return Err(ModelError::InvalidParams(format!("joint {k} axis is not a unit vector")));
            }
            if !(j.mass >= T::zero()) {
                return Err(ModelError::InvalidParams(format!("joint {k} mass is negative")));
            }
            if let BaseKind::Planar { .. } = self.base {
                if (j.axis.x.abs() - T::one()).abs() > unit_tol {
                    return Err(ModelError::InvalidParams(format!(
                        "joint {k}: a planar-base agent needs every axis along ±x"
                    )));
                }
            }
        }
        if !(self.load_share > T::zero() && self.load_share <= T::one()) {
            return Err(ModelError::InvalidParams("load share must lie in (0, 1]".into()));
        }
        let l = &self.limits;
        for (name, v) in [
            ("tau_max", l.tau_max),
            ("tau_rate_max", l.tau_rate_max),
            ("input_box", l.input_box),
            ("qdot_max", l.qdot_max),
            ("arm_rate_max", l.arm_rate_max),
        ] {
            if let Some(v) = v {
                if !(v > T::zero()) {
                    return Err(ModelError::InvalidParams(format!("limit {name} must be positive")));
                }
            }
        }
        if !(l.singularity_floor > T::zero()) {
            return Err(ModelError::InvalidParams("singularity floor must be positive".into()));
        }
        if !(l.tilt_max > T::zero() && l.tilt_max < T::frac_pi_2()) {
            return Err(ModelError::InvalidParams("tilt bound must lie in (0, pi/2)".into()));
        }
        if l.joint_boxes.len() > self.n_alpha() {
            return Err(ModelError::InvalidParams("more joint boxes than arm joints".into()));
        }
        for e in &self.ellipsoids {
            e.local.validate()?;
            if let Frame::Link(j) = e.frame {
                if j >= self.n_alpha() {
                    return Err(ModelError::InvalidParams(format!("ellipsoid attached to missing link {j}")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_q(&self, q: &DVector<T>) -> ModelResult<()> {
        if q.len() != self.dof() {
            return Err(ModelError::Dimension(format!(
                "configuration has {} entries, agent has {} degrees of freedom",
                q.len(),
                self.dof()
            )));
        }
        Ok(())
    }
}

/// World-frame quantities of every link at one configuration.
#[derive(Debug, Clone)]
pub(crate) struct Chain<T: Real> {
    pub p_b: Vector3<T>,
    pub r_b: Matrix3<T>,
    pub eta_b: EulerAngles<T>,
    /// Euler-rate Jacobian of the base; zero for planar bases.
    pub j_b: Matrix3<T>,
    /// Joint `j` location.
    pub origins: Vec<Vector3<T>>,
    /// Joint `j` axis, world frame.
    pub axes: Vec<Vector3<T>>,
    /// Orientation of link `j`.
    pub rots: Vec<Matrix3<T>>,
    pub p_e: Vector3<T>,
}

impl<T: Real> Chain<T> {
    pub fn new(params: &AgentParams<T>, q: &DVector<T>) -> Self {
        let (p_b, eta_b, j_b) = match params.base {
            BaseKind::Planar { height } => (Vector3::new(q[0], q[1], height), EulerAngles::zero(), Matrix3::zeros()),
            BaseKind::Floating => {
                let eta = EulerAngles::new(q[3], q[4], q[5]);
                (Vector3::new(q[0], q[1], q[2]), eta, euler_rate_jacobian(&eta))
            }
        };
        let r_b = match params.base {
            BaseKind::Planar { .. } => Matrix3::identity(),
            BaseKind::Floating => eta_b.rotation(),
        };
        let nb = params.base_dofs();
        let n = params.n_alpha();
        let mut origins = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        let mut rots = Vec::with_capacity(n);
        let mut o = p_b + r_b * params.mount;
        let mut r = r_b;
        for (k, joint) in params.joints.iter().enumerate() {
            let z = r * joint.axis;
            r *= rot_axis(&joint.axis, q[nb + k]);
            origins.push(o);
            axes.push(z);
            rots.push(r);
            o += r * joint.offset;
        }
        Self { p_b, r_b, eta_b, j_b, origins, axes, rots, p_e: o }
    }

    /// Origin and orientation of a body frame.
    pub fn frame(&self, f: Frame) -> (Vector3<T>, Matrix3<T>) {
        match f {
            Frame::Base => (self.p_b, self.r_b),
            Frame::Link(j) => (self.origins[j], self.rots[j]),
            Frame::EndEffector => (self.p_e, *self.rots.last().expect("non-empty chain")),
        }
    }

    /// Full 6 x n Jacobian of a point rigidly attached to `link`
    /// (`None` = base), stacked `[linear; angular]`.
    pub fn point_jacobian(&self, params: &AgentParams<T>, link: Option<usize>, p: &Vector3<T>) -> DMatrix<T> {
        let n = params.dof();
        let nb = params.base_dofs();
        let mut jac = DMatrix::zeros(6, n);
        match params.base {
            BaseKind::Planar { .. } => {
                jac[(0, 0)] = T::one();
                jac[(1, 1)] = T::one();
            }
            BaseKind::Floating => {
                for k in 0..3 {
                    jac[(k, k)] = T::one();
                }
                let lin = -skew(&(p - self.p_b)) * self.j_b;
                jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&lin);
                jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.j_b);
            }
        }
        if let Some(last) = link {
            for j in 0..=last {
                let z = self.axes[j];
                let lin = z.cross(&(p - self.origins[j]));
                jac.fixed_view_mut::<3, 1>(0, nb + j).copy_from(&lin);
                jac.fixed_view_mut::<3, 1>(3, nb + j).copy_from(&z);
            }
        }
        jac
    }

    /// World angular velocity of the base and of each link.
    fn angular_velocities(&self, params: &AgentParams<T>, qdot: &DVector<T>) -> (Vector3<T>, Vec<Vector3<T>>) {
        let nb = params.base_dofs();
        let w_b = match params.base {
            BaseKind::Planar { .. } => Vector3::zeros(),
            BaseKind::Floating => self.j_b * Vector3::new(qdot[3], qdot[4], qdot[5]),
        };
        let mut w = w_b;
        let mut out = Vec::with_capacity(self.axes.len());
        for (j, z) in self.axes.iter().enumerate() {
            w += z * qdot[nb + j];
            out.push(w);
        }
        (w_b, out)
    }

    /// Time derivative of [`Chain::point_jacobian`] along `qdot`.
    pub fn point_jacobian_dot(
        &self,
        params: &AgentParams<T>,
        link: Option<usize>,
        p: &Vector3<T>,
        qdot: &DVector<T>,
    ) -> DMatrix<T> {
        let n = params.dof();
        let nb = params.base_dofs();
        let (w_b, w) = self.angular_velocities(params, qdot);
        let v_b = match params.base {
            BaseKind::Planar { .. } => Vector3::new(qdot[0], qdot[1], T::zero()),
            BaseKind::Floating => Vector3::new(qdot[0], qdot[1], qdot[2]),
        };
        // Joint origin velocities.
        let mut o_dot = Vec::with_capacity(self.origins.len());
        let mut v = v_b + w_b.cross(&(self.origins.first().copied().unwrap_or(self.p_b) - self.p_b));
        for j in 0..self.origins.len() {
            o_dot.push(v);
            let next = if j + 1 < self.origins.len() { self.origins[j + 1] } else { self.p_e };
            v += w[j].cross(&(next - self.origins[j]));
        }
        let p_dot = match link {
            None => v_b + w_b.cross(&(p - self.p_b)),
            Some(k) => o_dot[k] + w[k].cross(&(p - self.origins[k])),
        };
        let mut jd = DMatrix::zeros(6, n);
        if let BaseKind::Floating = params.base {
            let eta_dot = Vector3::new(qdot[3], qdot[4], qdot[5]);
            let jb_dot = euler_rate_jacobian_dot(&self.eta_b, &eta_dot);
            let r = p - self.p_b;
            let lin = -skew(&(p_dot - v_b)) * self.j_b - skew(&r) * jb_dot;
            jd.fixed_view_mut::<3, 3>(0, 3).copy_from(&lin);
            jd.fixed_view_mut::<3, 3>(3, 3).copy_from(&jb_dot);
        }
        if let Some(last) = link {
            for j in 0..=last {
                let w_parent = if j == 0 { w_b } else { w[j - 1] };
                let z = self.axes[j];
                let z_dot = w_parent.cross(&z);
                let lin = z_dot.cross(&(p - self.origins[j])) + z.cross(&(p_dot - o_dot[j]));
                jd.fixed_view_mut::<3, 1>(0, nb + j).copy_from(&lin);
                jd.fixed_view_mut::<3, 1>(3, nb + j).copy_from(&z_dot);
            }
        }
        jd
    }
}

/// `d/dt J_B(eta)` for rates `eta_dot`.
pub fn euler_rate_jacobian_dot<T: Real>(eta: &EulerAngles<T>, eta_dot: &Vector3<T>) -> Matrix3<T> {
    let (sp, cp) = eta.phi.sin_cos();
    let (st, ct) = eta.theta.sin_cos();
    let (pd, td) = (eta_dot.x, eta_dot.y);
    let o = T::zero();
    Matrix3::new(o, o, ct * td, o, -sp * pd, st * td * sp - ct * cp * pd, o, cp * pd, -st * td * cp - ct * sp * pd)
}

fn select_rows<T: Real>(m: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Orientation part `k_eta` of the arm forward kinematics. For arms whose
/// axes all lie along ±x the angles add exactly; otherwise the x-y-z angles of
/// the arm rotation are used.
fn arm_euler<T: Real>(params: &AgentParams<T>, q: &DVector<T>, r_arm: &Matrix3<T>) -> EulerAngles<T> {
    let nb = params.base_dofs();
    let tol = T::tol(1e-12);
    let all_x = params.joints.iter().all(|j| j.axis.y.abs() <= tol && j.axis.z.abs() <= tol);
    if all_x {
        let phi = params.joints.iter().enumerate().fold(T::zero(), |acc, (k, j)| acc + j.axis.x.signum() * q[nb + k]);
        EulerAngles::new(phi, T::zero(), T::zero())
    } else {
        EulerAngles::from_rotation(r_arm)
    }
}

/// End-effector pose `p_E = p_B + R_B k_p(alpha)`, `eta_E = eta_B + k_eta(alpha)`.
pub fn forward_kinematics<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<EndEffectorPose<T>> {
    params.check_q(q)?;
    let chain = Chain::new(params, q);
    let rotation = *chain.rots.last().expect("validated chain");
    let r_arm = chain.r_b.transpose() * rotation;
    let eta_e = chain.eta_b + arm_euler(params, q, &r_arm);
    Ok(EndEffectorPose { p_e: chain.p_e, eta_e, rotation })
}

/// End-effector Jacobian restricted to the task rows (task-dim x n).
pub fn geometric_jacobian<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<DMatrix<T>> {
    params.check_q(q)?;
    let chain = Chain::new(params, q);
    let full = chain.point_jacobian(params, Some(params.n_alpha() - 1), &chain.p_e);
    Ok(select_rows(&full, params.task_rows()))
}

/// `d/dt J` along `qdot`, task rows only.
pub fn jacobian_derivative<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<DMatrix<T>> {
    params.check_q(q)?;
    params.check_q(qdot)?;
    let chain = Chain::new(params, q);
    let full = chain.point_jacobian_dot(params, Some(params.n_alpha() - 1), &chain.p_e, qdot);
    Ok(select_rows(&full, params.task_rows()))
}

/// Central finite difference of [`geometric_jacobian`] along `qdot` with step `1e-6`.
pub fn jacobian_derivative_fd<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<DMatrix<T>> {
    let h = fd_step::<T>(1e-6);
    let jp = geometric_jacobian(params, &(q + qdot * h))?;
    let jm = geometric_jacobian(params, &(q - qdot * h))?;
    Ok((jp - jm) / (h + h))
}

fn fd_step<T: Real>(preferred: f64) -> T {
    let cbrt = T::default_epsilon().cbrt();
    let p = T::c(preferred);
    if p > cbrt * T::c(1e-3) {
        p
    } else {
        cbrt
    }
}

/// `det(J Jᵀ)` over the task rows.
pub fn singularity_measure<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<T> {
    let j = geometric_jacobian(params, q)?;
    Ok((&j * j.transpose()).determinant())
}

/// Rigid bodies of the agent: (mass, inertia about the center in world axes,
/// 6 x n Jacobian of the center).
fn bodies<T: Real>(params: &AgentParams<T>, chain: &Chain<T>) -> Vec<(T, Matrix3<T>, DMatrix<T>)> {
    let mut out = Vec::with_capacity(params.n_alpha() + 1);
    let jb = chain.point_jacobian(params, None, &chain.p_b);
    let ib = match params.base {
        BaseKind::Planar { .. } => Matrix3::zeros(),
        BaseKind::Floating => chain.r_b * params.base_inertia * chain.r_b.transpose(),
    };
    out.push((params.base_mass, ib, jb));
    for (k, joint) in params.joints.iter().enumerate() {
        let r = chain.rots[k];
        let c = chain.origins[k] + r * joint.com;
        let jac = chain.point_jacobian(params, Some(k), &c);
        out.push((joint.mass, r * joint.inertia * r.transpose(), jac));
    }
    out
}

/// Joint-space inertia `B(q)`.
pub fn inertia_matrix<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<DMatrix<T>> {
    params.check_q(q)?;
    let chain = Chain::new(params, q);
    Ok(inertia_from_chain(params, &chain))
}

fn inertia_from_chain<T: Real>(params: &AgentParams<T>, chain: &Chain<T>) -> DMatrix<T> {
    let n = params.dof();
    let mut b = DMatrix::zeros(n, n);
    for (m, iw, jac) in bodies(params, chain) {
        let jv = jac.rows(0, 3);
        let jw = jac.rows(3, 3);
        let iw = DMatrix::from_iterator(3, 3, iw.iter().copied());
        b += jv.transpose() * jv * m + jw.transpose() * iw * jw;
    }
    (&b + b.transpose()) * T::c(0.5)
}

/// Gradient of the potential energy, gravity along `-z`.
pub fn gravity_vector<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<DVector<T>> {
    params.check_q(q)?;
    let chain = Chain::new(params, q);
    Ok(gravity_from_chain(params, &chain))
}

fn gravity_from_chain<T: Real>(params: &AgentParams<T>, chain: &Chain<T>) -> DVector<T> {
    let g = T::c(GRAVITY);
    let mut out = DVector::zeros(params.dof());
    for (m, _, jac) in bodies(params, chain) {
        out += jac.row(2).transpose() * (m * g);
    }
    out
}

/// Potential energy `sum m g z`.
pub fn potential_energy<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<T> {
    params.check_q(q)?;
    let chain = Chain::new(params, q);
    let g = T::c(GRAVITY);
    let mut u = params.base_mass * g * chain.p_b.z;
    for (k, joint) in params.joints.iter().enumerate() {
        let c = chain.origins[k] + chain.rots[k] * joint.com;
        u += joint.mass * g * c.z;
    }
    Ok(u)
}

/// `(B, N, g_q)` with `N` built from the Christoffel symbols of `B`.
pub fn joint_space_terms<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<JointSpaceTerms<T>> {
    params.check_q(q)?;
    params.check_q(qdot)?;
    let n = params.dof();
    let chain = Chain::new(params, q);
    let b = inertia_from_chain(params, &chain);
    let g = gravity_from_chain(params, &chain);

    // B is invariant under base translation; differentiate only the rest.
    let first = match params.base {
        BaseKind::Planar { .. } => 2,
        BaseKind::Floating => 3,
    };
    let h = fd_step::<T>(1e-5);
    let mut db: Vec<Option<DMatrix<T>>> = vec![None; n];
    for (i, slot) in db.iter_mut().enumerate().skip(first) {
        let mut qp = q.clone();
        qp[i] += h;
        let mut qm = q.clone();
        qm[i] -= h;
        let bp = inertia_from_chain(params, &Chain::new(params, &qp));
        let bm = inertia_from_chain(params, &Chain::new(params, &qm));
        *slot = Some((bp - bm) / (h + h));
    }
    let d = |i: usize, r: usize, c: usize| -> T { db[i].as_ref().map_or(T::zero(), |m| m[(r, c)]) };
    let half = T::c(0.5);
    let mut nm = DMatrix::zeros(n, n);
    for k in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..n {
                let c = (d(i, k, j) + d(j, k, i) - d(k, i, j)) * half;
                acc += c * qdot[i];
            }
            nm[(k, j)] = acc;
        }
    }
    Ok(JointSpaceTerms { b, n: nm, g })
}

/// Task-space `(M_i, C_i, g_i)`; fails when `det(J Jᵀ)` is below the agent's floor.
pub fn task_space_terms<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<TaskSpaceTerms<T>> {
    let js = joint_space_terms(params, q, qdot)?;
    let j = geometric_jacobian(params, q)?;
    let measure = (&j * j.transpose()).determinant();
    let floor = params.limits.singularity_floor;
    if !(measure >= floor) {
        return Err(ModelError::KinematicSingularity { measure: to_f64(measure), floor: to_f64(floor) });
    }
    let jdot = jacobian_derivative(params, q, qdot)?;
    let b_chol =
        js.b.clone()
            .cholesky()
            .ok_or_else(|| ModelError::InvalidParams("joint-space inertia is not positive definite".into()))?;
    let binv_jt = b_chol.solve(&j.transpose());
    let binv_n = b_chol.solve(&js.n);
    let binv_g = b_chol.solve(&js.g);
    let lambda_inv = &j * &binv_jt;
    let lambda_inv = (&lambda_inv + lambda_inv.transpose()) * T::c(0.5);
    let m = lambda_inv
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| ModelError::KinematicSingularity { measure: to_f64(measure), floor: to_f64(floor) })?;
    let m = (&m + m.transpose()) * T::c(0.5);
    let cj = &m * (&j * binv_n - &jdot);
    // Dynamically consistent generalized inverse of J.
    let jbar = &binv_jt * &m;
    let c = &cj * jbar;
    let g = &m * (&j * binv_g);
    Ok(TaskSpaceTerms { m, c, g, j, jdot, cj })
}

/// `tau = Jᵀ u` (the null-space torque is zero).
pub fn input_map<T: Real>(params: &AgentParams<T>, q: &DVector<T>, u: &DVector<T>) -> ModelResult<DVector<T>> {
    let j = geometric_jacobian(params, q)?;
    if u.len() != j.nrows() {
        return Err(ModelError::Dimension(format!("input has {} entries, task dimension is {}", u.len(), j.nrows())));
    }
    Ok(j.transpose() * u)
}

/// Least-squares inverse of [`input_map`]; exact for square nonsingular `J`.
pub fn input_from_torque<T: Real>(
    params: &AgentParams<T>,
    q: &DVector<T>,
    tau: &DVector<T>,
) -> ModelResult<DVector<T>> {
    let j = geometric_jacobian(params, q)?;
    params.check_q(tau)?;
    let jjt = &j * j.transpose();
    let chol = jjt.cholesky().ok_or_else(|| ModelError::KinematicSingularity {
        measure: 0.0,
        floor: to_f64(params.limits.singularity_floor),
    })?;
    Ok(chol.solve(&(&j * tau)))
}

/// Bounding ellipsoids of the agent placed in the world.
pub fn agent_ellipsoids<T: Real>(params: &AgentParams<T>, q: &DVector<T>) -> ModelResult<Vec<Ellipsoid<T>>> {
    params.check_q(q)?;
    let chain = Chain::new(params, q);
    Ok(params
        .ellipsoids
        .iter()
        .map(|e| {
            let (o, r) = chain.frame(e.frame);
            e.local.transformed(&o, &r)
        })
        .collect())
}

/// Kinetic energy `½ q̇ᵀ B q̇`.
pub fn kinetic_energy<T: Real>(params: &AgentParams<T>, q: &DVector<T>, qdot: &DVector<T>) -> ModelResult<T> {
    let b = inertia_matrix(params, q)?;
    Ok(qdot.dot(&(b * qdot)) * T::c(0.5))
}

pub(crate) fn to_f64<T: Real>(v: T) -> f64 {
    nalgebra::try_convert(v).unwrap_or(f64::NAN)
}
