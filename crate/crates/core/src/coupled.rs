//! Load-shared coupled dynamics of one agent holding the object, its forward
//! dynamics, and the leader's object-error dynamics.
//!
//! All object-side 6 x 6 quantities are reduced to the agent's task rows
//! (`Σ A Σᵀ`), which is exact when the motion never leaves those coordinates.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::agent::{task_space_terms, to_f64, AgentParams, AgentState, TaskSpaceTerms};
use crate::error::{ModelError, ModelResult};
use crate::object::{
    coupling_from_lever, coupling_jacobian_dot, end_effector_twist, grasp_lever, object_dynamics_terms,
    object_pose_from_agent, representation_jacobian_inverse, ObjectParams, ObjectPose, ObjectTwist,
};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTerms<T: Real> {
    /// `M̃_i`, task-dim x n.
    pub mtilde: DMatrix<T>,
    /// `C̃_i`, task-dim x n.
    pub ctilde: DMatrix<T>,
    /// `g̃_i`.
    pub gtilde: DVector<T>,
    /// Reduced `J_Oiᵀ`, mapping the agent's input into the object equation.
    pub j_oi_t: DMatrix<T>,
    /// Reduced `J_iO`.
    pub j_io: DMatrix<T>,
    /// Reduced `J̇_iO`.
    pub j_io_dot: DMatrix<T>,
    pub task: TaskSpaceTerms<T>,
    pub pose: ObjectPose<T>,
    pub twist: ObjectTwist<T>,
}

pub(crate) fn reduce6<T: Real>(a: &Matrix6<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), rows.len(), |r, c| a[(rows[r], rows[c])])
}

pub(crate) fn reduce6v<T: Real>(a: &Vector6<T>, rows: &[usize]) -> DVector<T> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&r| a[r]))
}

/// `M̃_i`, `C̃_i`, `g̃_i` at one agent state. The object term of `C̃_i` is
/// `c_i C_O J_iO J_i`, making `C̃_i q̇` the load-shared object Coriolis wrench.
pub fn coupled_terms<T: Real>(
    agent: &AgentParams<T>,
    object: &ObjectParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
) -> ModelResult<CoupledTerms<T>> {
    let task = task_space_terms(agent, q, qdot)?;
    let rows = agent.task_rows();
    let pose = object_pose_from_agent(agent, q)?;
    let lever = grasp_lever(agent, q)?;
    let (j_io6, j_oi6) = coupling_from_lever(&lever);
    let v_e = end_effector_twist(agent, q, qdot)?;
    let twist = ObjectTwist::from_vector(&(j_io6 * v_e));
    let od = object_dynamics_terms(object, &pose, &twist)?;
    let j_io_dot6 = coupling_jacobian_dot(&lever, &twist.omega);

    let c = agent.load_share;
    let j = &task.j;
    let jdot = &task.jdot;
    let mo_jio = reduce6(&(od.m * j_io6), rows);
    let co_jio = reduce6(&(od.c * j_io6), rows);
    let mo_jio_dot = reduce6(&(od.m * j_io_dot6), rows);
    let j_oi_t = reduce6(&j_oi6.transpose(), rows);

    let mtilde = &mo_jio * j * c + &j_oi_t * &task.m * j;
    let ctilde = &j_oi_t * (&task.m * jdot + &task.cj) + (&mo_jio * jdot + &mo_jio_dot * j + &co_jio * j) * c;
    let gtilde = reduce6v(&od.g, rows) * c + &j_oi_t * &task.g;
    Ok(CoupledTerms {
        mtilde,
        ctilde,
        gtilde,
        j_oi_t,
        j_io: reduce6(&j_io6, rows),
        j_io_dot: reduce6(&j_io_dot6, rows),
        task,
        pose,
        twist,
    })
}

/// Minimum-norm solution of `A x = b` for a wide or square full-row-rank `A`,
/// i.e. `x = Aᵀ (A Aᵀ)⁻¹ b`, through a QR factorisation of `Aᵀ`.
pub fn right_pseudo_inverse_solve<T: Real>(a: &DMatrix<T>, b: &DVector<T>) -> ModelResult<DVector<T>> {
    let (m, n) = a.shape();
    if m > n {
        return Err(ModelError::Dimension(format!("{m} x {n} matrix has no right inverse")));
    }
    let qr = a.transpose().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    let tol = T::tol(1e-13) * scale.max(T::one());
    let min_diag = r.diagonal().iter().fold(scale, |acc, v| acc.min(v.abs()));
    if !(min_diag > tol) {
        return Err(ModelError::KinematicSingularity { measure: to_f64(min_diag), floor: to_f64(tol) });
    }
    // Aᵀ = Q R  =>  A = Rᵀ Qᵀ, x = Q R⁻ᵀ b.
    let y = r
        .transpose()
        .solve_lower_triangular(b)
        .ok_or_else(|| ModelError::KinematicSingularity { measure: 0.0, floor: to_f64(tol) })?;
    Ok(qr.q() * y)
}

/// Explicit `M̂ = M̃ᵀ (M̃ M̃ᵀ)⁻¹`.
pub fn right_pseudo_inverse<T: Real>(a: &DMatrix<T>) -> ModelResult<DMatrix<T>> {
    let m = a.nrows();
    let mut out = DMatrix::zeros(a.ncols(), m);
    for k in 0..m {
        let mut e = DVector::zeros(m);
        e[k] = T::one();
        out.set_column(k, &right_pseudo_inverse_solve(a, &e)?);
    }
    Ok(out)
}

/// Right-hand side `J_Oiᵀ u - C̃ q̇ - g̃`.
pub fn coupled_rhs<T: Real>(terms: &CoupledTerms<T>, qdot: &DVector<T>, u: &DVector<T>) -> DVector<T> {
    &terms.j_oi_t * u - &terms.ctilde * qdot - &terms.gtilde
}

/// `(q̇, q̈)` with `q̈ = M̂ (J_Oiᵀ u - C̃ q̇ - g̃)`.
pub fn forward_dynamics<T: Real>(
    agent: &AgentParams<T>,
    object: &ObjectParams<T>,
    state: &AgentState<T>,
    u: &DVector<T>,
) -> ModelResult<(DVector<T>, DVector<T>)> {
    let terms = coupled_terms(agent, object, &state.q, &state.qdot)?;
    check_input(agent, u)?;
    let qddot = right_pseudo_inverse_solve(&terms.mtilde, &coupled_rhs(&terms, &state.qdot, u))?;
    Ok((state.qdot.clone(), qddot))
}

fn check_input<T: Real>(agent: &AgentParams<T>, u: &DVector<T>) -> ModelResult<()> {
    if u.len() != agent.task_dim() {
        return Err(ModelError::Dimension(format!(
            "input has {} entries, task dimension is {}",
            u.len(),
            agent.task_dim()
        )));
    }
    Ok(())
}

/// Input that balances gravity at rest: `J_Oiᵀ u = g̃(q)` with `q̇ = 0`.
pub fn equilibrium_input<T: Real>(
    agent: &AgentParams<T>,
    object: &ObjectParams<T>,
    q: &DVector<T>,
) -> ModelResult<DVector<T>> {
    let zero = DVector::zeros(q.len());
    let terms = coupled_terms(agent, object, q, &zero)?;
    terms
        .j_oi_t
        .clone()
        .lu()
        .solve(&terms.gtilde)
        .ok_or_else(|| ModelError::InvalidParams("coupling matrix is singular".into()))
}

/// `e = [x_O - x_des; v_O]` over the task coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState<T: Real> {
    pub pose_error: DVector<T>,
    pub twist: DVector<T>,
}

impl<T: Real> ErrorState<T> {
    pub fn to_vector(&self) -> DVector<T> {
        let n = self.pose_error.len();
        let mut v = DVector::zeros(n + self.twist.len());
        v.rows_mut(0, n).copy_from(&self.pose_error);
        v.rows_mut(n, self.twist.len()).copy_from(&self.twist);
        v
    }

    pub fn norm(&self) -> T {
        self.to_vector().norm()
    }
}

/// Leader error `e_1` at a state.
pub fn error_state<T: Real>(
    agent: &AgentParams<T>,
    q: &DVector<T>,
    qdot: &DVector<T>,
    x_des: &ObjectPose<T>,
) -> ModelResult<ErrorState<T>> {
    let rows = agent.task_rows();
    let pose = object_pose_from_agent(agent, q)?;
    let lever = grasp_lever(agent, q)?;
    let (j_io, _) = coupling_from_lever(&lever);
    let v = j_io * end_effector_twist(agent, q, qdot)?;
    Ok(ErrorState { pose_error: pose.reduced(rows) - x_des.reduced(rows), twist: reduce6v(&v, rows) })
}

/// `ė_1 = [J_Or⁻¹ v_O; J_iO J q̈ + (J_iO J̇ + J̇_iO J) q̇]`.
pub fn error_dynamics<T: Real>(
    agent: &AgentParams<T>,
    object: &ObjectParams<T>,
    state: &AgentState<T>,
    u: &DVector<T>,
) -> ModelResult<ErrorState<T>> {
    check_input(agent, u)?;
    let rows = agent.task_rows();
    let terms = coupled_terms(agent, object, &state.q, &state.qdot)?;
    let qddot = right_pseudo_inverse_solve(&terms.mtilde, &coupled_rhs(&terms, &state.qdot, u))?;
    let j_or_inv = representation_jacobian_inverse(&terms.pose.eta)?;
    let pose_rate = reduce6(&j_or_inv, rows) * terms.twist.reduced(rows);
    let j = &terms.task.j;
    let acc = &terms.j_io * (j * &qddot) + (&terms.j_io * &terms.task.jdot + &terms.j_io_dot * j) * &state.qdot;
    Ok(ErrorState { pose_error: pose_rate, twist: acc })
}
