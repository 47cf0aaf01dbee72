//! Line-search SQP for small dense nonlinear programs
//!
//! ```text
//! min f(z)   s.t.   c(z) <= 0,   h(z) = 0
//! ```
//!
//! Each iteration solves a convex QP model with the Goldfarb–Idnani solver.
//! Curvature comes from Gauss–Newton when the objective is a sum of squares
//! and from a damped BFGS update otherwise. Steps are accepted on the ℓ1 merit
//! `f + μ(Σ max(0, c) + Σ |h|)`. When the linearized constraints are
//! inconsistent the QP is re-solved in elastic form with penalized slacks.

use cotrans_core::ModelError;
use log::debug;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Values of one NLP at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    /// When present, `objective == ‖residuals‖²`.
    pub residuals: Option<DVector<f64>>,
    /// Feasible when `<= 0`.
    pub ineq: DVector<f64>,
    pub eq: DVector<f64>,
}

impl Evaluation {
    pub fn violation(&self) -> f64 {
        self.ineq.iter().map(|c| c.max(0.0)).sum::<f64>() + self.eq.iter().map(|h| h.abs()).sum::<f64>()
    }

    pub fn max_violation(&self) -> f64 {
        let a = self.ineq.iter().fold(0.0f64, |m, c| m.max(*c));
        self.eq.iter().fold(a, |m, h| m.max(h.abs()))
    }

    fn is_finite(&self) -> bool {
        self.objective.is_finite() && self.ineq.iter().all(|v| v.is_finite()) && self.eq.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub gradient: DVector<f64>,
    pub residual_jacobian: Option<DMatrix<f64>>,
    pub ineq_jacobian: DMatrix<f64>,
    pub eq_jacobian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    Forward,
    Central,
}

impl FdScheme {
    pub fn step(self, z: f64) -> f64 {
        match self {
            FdScheme::Forward => 1.5e-8 * z.abs().max(1.0),
            FdScheme::Central => 6e-6 * z.abs().max(1.0),
        }
    }
}

pub trait NlpProblem {
    fn num_vars(&self) -> usize;

    fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation, NlpError>;

    fn derivatives(&self, z: &DVector<f64>, at: &Evaluation) -> Result<Derivatives, NlpError> {
        finite_difference_derivatives(self, z, at, FdScheme::Central)
    }
}

/// Column-by-column finite differences of [`NlpProblem::evaluate`].
pub fn finite_difference_derivatives<P: NlpProblem + ?Sized>(
    problem: &P,
    z: &DVector<f64>,
    at: &Evaluation,
    scheme: FdScheme,
) -> Result<Derivatives, NlpError> {
    let n = z.len();
    let mut d = Derivatives {
        gradient: DVector::zeros(n),
        residual_jacobian: at.residuals.as_ref().map(|r| DMatrix::zeros(r.len(), n)),
        ineq_jacobian: DMatrix::zeros(at.ineq.len(), n),
        eq_jacobian: DMatrix::zeros(at.eq.len(), n),
    };
    for i in 0..n {
        let h = scheme.step(z[i]);
        let mut zp = z.clone();
        zp[i] += h;
        let plus = problem.evaluate(&zp)?;
        let (minus, width) = match scheme {
            FdScheme::Forward => (at.clone(), h),
            FdScheme::Central => {
                let mut zm = z.clone();
                zm[i] -= h;
                (problem.evaluate(&zm)?, 2.0 * h)
            }
        };
        fill_column(&mut d, i, &plus, &minus, width)?;
    }
    finish_gradient(&mut d, at);
    Ok(d)
}

/// Writes column `i` of every Jacobian from a pair of evaluations.
pub fn fill_column(
    d: &mut Derivatives,
    i: usize,
    plus: &Evaluation,
    minus: &Evaluation,
    width: f64,
) -> Result<(), NlpError> {
    d.gradient[i] = (plus.objective - minus.objective) / width;
    if let (Some(jr), Some(rp), Some(rm)) = (d.residual_jacobian.as_mut(), &plus.residuals, &minus.residuals) {
        jr.set_column(i, &((rp - rm) / width));
    }
    d.ineq_jacobian.set_column(i, &((&plus.ineq - &minus.ineq) / width));
    d.eq_jacobian.set_column(i, &((&plus.eq - &minus.eq) / width));
    if !d.gradient[i].is_finite() {
        return Err(NlpError::NonFinite("gradient"));
    }
    Ok(())
}

/// Replaces the objective gradient by `2 Jᵣᵀ r` when residuals are available.
pub fn finish_gradient(d: &mut Derivatives, at: &Evaluation) {
    if let (Some(jr), Some(r)) = (&d.residual_jacobian, &at.residuals) {
        d.gradient = jr.tr_mul(r) * 2.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Gauss–Newton when residuals are supplied, BFGS otherwise.
    Auto,
    Bfgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpOptions {
    pub max_iterations: usize,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub step_tol: f64,
    pub hessian: HessianMode,
    pub armijo: f64,
    pub min_step: f64,
    pub initial_penalty: f64,
    /// Slack weight in elastic mode, relative to the merit penalty.
    pub elastic_factor: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            kkt_tol: 1e-6,
            feas_tol: 1e-6,
            step_tol: 1e-12,
            hessian: HessianMode::Auto,
            armijo: 1e-4,
            min_step: 1e-8,
            initial_penalty: 10.0,
            elastic_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

/// Merit values on either side of one accepted step, same penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep {
    pub before: f64,
    pub after: f64,
    pub penalty: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpResult {
    pub z: DVector<f64>,
    pub eval: Evaluation,
    pub status: SqpStatus,
    pub iterations: usize,
    pub kkt: f64,
    pub max_violation: f64,
    pub ineq_multipliers: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub merit_steps: Vec<MeritStep>,
    /// Whether any iteration needed the elastic QP.
    pub used_elastic: bool,
}

struct Step {
    d: DVector<f64>,
    lambda: DVector<f64>,
    nu: DVector<f64>,
    elastic: bool,
}

fn linearized_violation(ev: &Evaluation, der: &Derivatives, d: &DVector<f64>) -> f64 {
    let c = &ev.ineq + &der.ineq_jacobian * d;
    let h = &ev.eq + &der.eq_jacobian * d;
    c.iter().map(|v| v.max(0.0)).sum::<f64>() + h.iter().map(|v| v.abs()).sum::<f64>()
}

fn qp_step(
    h: &DMatrix<f64>,
    ev: &Evaluation,
    der: &Derivatives,
    penalty: f64,
    elastic_factor: f64,
) -> Result<Step, NlpError> {
    let b_in = -&ev.ineq;
    let b_eq = -&ev.eq;
    let plain = solve_qp(&QpProblem {
        hessian: h,
        gradient: &der.gradient,
        a_eq: &der.eq_jacobian,
        b_eq: &b_eq,
        a_in: &der.ineq_jacobian,
        b_in: &b_in,
    });
    match plain {
        Ok(s) => return Ok(Step { d: s.x, lambda: s.ineq_multipliers, nu: s.eq_multipliers, elastic: false }),
        Err(QpError::Infeasible | QpError::DependentEqualities | QpError::IterationLimit) => {}
        Err(e) => return Err(e.into()),
    }
    // Elastic form over (d, t, p, m): A d - t <= -c, E d - p + m = -h, slacks >= 0.
    let n = der.gradient.len();
    let mi = ev.ineq.len();
    let me = ev.eq.len();
    let nt = n + mi + 2 * me;
    let rho = penalty * elastic_factor;
    let mut hh = DMatrix::zeros(nt, nt);
    hh.view_mut((0, 0), (n, n)).copy_from(h);
    let slack_curv = 1e-8 * (1.0 + h.diagonal().amax());
    for k in n..nt {
        hh[(k, k)] = slack_curv;
    }
    let mut g = DVector::from_element(nt, rho);
    g.rows_mut(0, n).copy_from(&der.gradient);
    let mut a_in = DMatrix::zeros(2 * mi + 2 * me, nt);
    let mut b = DVector::zeros(2 * mi + 2 * me);
    a_in.view_mut((0, 0), (mi, n)).copy_from(&der.ineq_jacobian);
    for k in 0..mi {
        a_in[(k, n + k)] = -1.0;
        b[k] = -ev.ineq[k];
        a_in[(mi + k, n + k)] = -1.0;
    }
    for k in 0..2 * me {
        a_in[(2 * mi + k, n + mi + k)] = -1.0;
    }
    let mut a_eq = DMatrix::zeros(me, nt);
    a_eq.view_mut((0, 0), (me, n)).copy_from(&der.eq_jacobian);
    for k in 0..me {
        a_eq[(k, n + mi + k)] = -1.0;
        a_eq[(k, n + mi + me + k)] = 1.0;
    }
    let s = solve_qp(&QpProblem { hessian: &hh, gradient: &g, a_eq: &a_eq, b_eq: &b_eq, a_in: &a_in, b_in: &b })?;
    Ok(Step {
        d: s.x.rows(0, n).into_owned(),
        lambda: s.ineq_multipliers.rows(0, mi).into_owned(),
        nu: s.eq_multipliers,
        elastic: true,
    })
}

fn kkt_residual(ev: &Evaluation, der: &Derivatives, lambda: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let stat = &der.gradient + der.ineq_jacobian.tr_mul(lambda) + der.eq_jacobian.tr_mul(nu);
    let comp = ev.ineq.iter().zip(lambda.iter()).fold(0.0f64, |m, (c, l)| m.max((c * l).abs()));
    stat.amax().max(comp)
}

fn lagrangian_gradient(der: &Derivatives, lambda: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64> {
    &der.gradient + der.ineq_jacobian.tr_mul(lambda) + der.eq_jacobian.tr_mul(nu)
}

fn check_eval(problem_n: usize, z: &DVector<f64>, ev: &Evaluation) -> Result<(), NlpError> {
    if z.len() != problem_n {
        return Err(NlpError::Dimension(format!("expected {problem_n} variables, got {}", z.len())));
    }
    if let Some(r) = &ev.residuals {
        if (r.norm_squared() - ev.objective).abs() > 1e-9 * ev.objective.abs().max(1.0) {
            return Err(NlpError::Dimension("objective is not the residual sum of squares".into()));
        }
    }
    if !ev.is_finite() {
        return Err(NlpError::NonFinite("evaluation"));
    }
    Ok(())
}

/// Iterate kept in case the solver stops without converging.
struct Best {
    z: DVector<f64>,
    ev: Evaluation,
    kkt: f64,
    lambda: DVector<f64>,
    nu: DVector<f64>,
}

impl Best {
    /// Feasible iterates rank by objective, the rest by violation.
    fn better_than(&self, other: &Best, feas_tol: f64) -> bool {
        let (a, b) = (self.ev.max_violation(), other.ev.max_violation());
        match (a <= feas_tol, b <= feas_tol) {
            (true, true) => self.ev.objective < other.ev.objective,
            (true, false) => true,
            (false, true) => false,
            (false, false) => a < b,
        }
    }
}

/// Runs SQP from `z0`. Without convergence the best iterate seen is returned.
pub fn solve<P: NlpProblem + ?Sized>(problem: &P, z0: &DVector<f64>, opts: &SqpOptions) -> Result<SqpResult, NlpError> {
    let n = problem.num_vars();
    let mut z = z0.clone();
    let mut ev = problem.evaluate(&z)?;
    check_eval(n, &z, &ev)?;
    let mut penalty = opts.initial_penalty;
    let mut bfgs = DMatrix::<f64>::identity(n, n);
    let mut pending: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut merit_steps = Vec::new();
    let mut used_elastic = false;
    let mut lambda = DVector::zeros(ev.ineq.len());
    let mut nu = DVector::zeros(ev.eq.len());
    let mut kkt;
    let status;
    let mut iterations = 0;
    // Levenberg-Marquardt damping on the Gauss-Newton model, relative to its scale.
    let mut damping = 0.0f64;
    let mut best: Option<Best> = None;

    loop {
        let der = problem.derivatives(&z, &ev)?;
        let use_gn = opts.hessian == HessianMode::Auto && der.residual_jacobian.is_some();
        if let Some((s, grad_old)) = pending.take() {
            if !use_gn {
                let y = lagrangian_gradient(&der, &lambda, &nu) - grad_old;
                damped_bfgs_update(&mut bfgs, &s, &y);
            }
        }
        let h = if use_gn {
            let jr = der.residual_jacobian.as_ref().expect("checked above");
            let mut h = jr.tr_mul(jr) * 2.0;
            let reg = (1e-10 + damping) * (1.0 + h.diagonal().amax());
            for k in 0..n {
                h[(k, k)] += reg;
            }
            h
        } else {
            bfgs.clone()
        };

        let step = qp_step(&h, &ev, &der, penalty, opts.elastic_factor)?;
        used_elastic |= step.elastic;
        lambda = step.lambda;
        nu = step.nu;
        kkt = kkt_residual(&ev, &der, &lambda, &nu);
        let maxviol = ev.max_violation();
        let step_small = step.d.amax() <= opts.step_tol * (1.0 + z.amax());
        debug!(
            target: "sqp",
            "iter={iterations} f={:.6e} kkt={kkt:.3e} viol={maxviol:.3e} |d|={:.3e} mu={penalty:.3e} elastic={}",
            ev.objective,
            step.d.amax(),
            step.elastic
        );
        if maxviol <= opts.feas_tol && (kkt <= opts.kkt_tol || step_small) {
            status = SqpStatus::Converged;
            best = None;
            break;
        }
        let candidate = Best { z: z.clone(), ev: ev.clone(), kkt, lambda: lambda.clone(), nu: nu.clone() };
        if best.as_ref().is_none_or(|b| candidate.better_than(b, opts.feas_tol)) {
            best = Some(candidate);
        }
        if iterations >= opts.max_iterations {
            status = SqpStatus::MaxIterations;
            break;
        }

        let mult = lambda.amax().max(nu.amax());
        if penalty < 1.1 * mult {
            penalty = 2.0 * mult;
        }
        let viol = ev.violation();
        let merit0 = ev.objective + penalty * viol;
        let mut slope = der.gradient.dot(&step.d) + penalty * (linearized_violation(&ev, &der, &step.d) - viol);
        if slope >= 0.0 {
            slope = -step.d.dot(&(&h * &step.d));
        }
        let mut alpha = 1.0;
        let accepted = loop {
            let zt = &z + &step.d * alpha;
            if let Ok(et) = problem.evaluate(&zt) {
                if et.is_finite() {
                    let merit = et.objective + penalty * et.violation();
                    if merit <= merit0 + opts.armijo * alpha * slope {
                        merit_steps.push(MeritStep { before: merit0, after: merit, penalty, step_length: alpha });
                        break Some((zt, et));
                    }
                }
            }
            alpha *= 0.5;
            if alpha < opts.min_step {
                break None;
            }
        };
        let Some((zt, et)) = accepted else {
            status = SqpStatus::LineSearchFailure;
            break;
        };
        debug!(target: "sqp", "alpha={alpha:.3e} active={}", lambda.iter().filter(|l| **l > 0.0).count());
        if use_gn {
            damping = if alpha < 1.0 {
                (4.0 * damping).max(1e-4)
            } else if damping > 1e-8 {
                damping / 4.0
            } else {
                0.0
            };
        }
        pending = Some((&zt - &z, lagrangian_gradient(&der, &lambda, &nu)));
        z = zt;
        ev = et;
        iterations += 1;
    }

    if let Some(b) = best {
        let last = Best { z: z.clone(), ev: ev.clone(), kkt, lambda: lambda.clone(), nu: nu.clone() };
        if !last.better_than(&b, opts.feas_tol) {
            (z, ev, kkt, lambda, nu) = (b.z, b.ev, b.kkt, b.lambda, b.nu);
        }
    }
    let max_violation = ev.max_violation();
    Ok(SqpResult {
        z,
        eval: ev,
        status,
        iterations,
        kkt,
        max_violation,
        ineq_multipliers: lambda,
        eq_multipliers: nu,
        merit_steps,
        used_elastic,
    })
}

/// Powell-damped BFGS update keeping `b` positive definite.
pub fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= f64::EPSILON * s.norm_squared().max(f64::MIN_POSITIVE) {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock with a disk constraint; optimum near (0.7864, 0.6177).
    struct Rosen;

    impl NlpProblem for Rosen {
        fn num_vars(&self) -> usize {
            2
        }
        fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation, NlpError> {
            let (x, y) = (z[0], z[1]);
            let r = DVector::from_vec(vec![1.0 - x, 10.0 * (y - x * x)]);
            Ok(Evaluation {
                objective: r.norm_squared(),
                residuals: Some(r),
                ineq: DVector::from_vec(vec![x * x + y * y - 1.0]),
                eq: DVector::zeros(0),
            })
        }
    }

    #[test]
    fn constrained_rosenbrock() {
        let r = solve(
            &Rosen,
            &DVector::from_vec(vec![-1.0, 0.5]),
            &SqpOptions { max_iterations: 200, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.status, SqpStatus::Converged);
        assert!((r.z[0] - 0.7864).abs() < 1e-3 && (r.z[1] - 0.6177).abs() < 1e-3, "{:?}", r.z);
        assert!(r.merit_steps.iter().all(|m| m.after < m.before));
    }

    #[test]
    fn bfgs_agrees_with_gauss_newton() {
        let opts = SqpOptions { max_iterations: 300, hessian: HessianMode::Bfgs, ..Default::default() };
        let r = solve(&Rosen, &DVector::from_vec(vec![0.0, 0.0]), &opts).unwrap();
        assert_eq!(r.status, SqpStatus::Converged);
        assert!((r.z[0] - 0.7864).abs() < 1e-3);
    }

    #[test]
    fn bfgs_update_keeps_definiteness() {
        let mut b = DMatrix::identity(2, 2);
        let s = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-1.0, 0.5]);
        damped_bfgs_update(&mut b, &s, &y);
        assert!(b.cholesky().is_some());
    }
}
