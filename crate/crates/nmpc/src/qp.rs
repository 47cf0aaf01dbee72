//! Dense convex quadratic programs by the Goldfarb–Idnani dual active-set
//! method.
//!
//! Solves `min ½ xᵀHx + gᵀx` subject to `A_eq x = b_eq` and `A_in x <= b_in`
//! with `H` positive definite. The dual method starts from the unconstrained
//! minimizer and adds violated constraints one at a time, so it needs no
//! feasible starting point and reports infeasibility when the dual step is
//! unbounded.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP hessian is not positive definite")]
    NotConvex,
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
    #[error("QP active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub gradient: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
}

/// Multipliers satisfy `Hx + g + A_eqᵀν + A_inᵀλ = 0` with `λ >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Indices of active inequality rows.
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Row {
    Eq(usize),
    In(usize),
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    active: Vec<Row>,
    u: Vec<f64>,
}

impl Factor {
    fn iq(&self) -> usize {
        self.active.len()
    }

    fn compute_d(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    fn compute_z(&self, d: &DVector<f64>) -> DVector<f64> {
        let iq = self.iq();
        let mut z = DVector::zeros(self.n);
        for k in iq..self.n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        z
    }

    fn compute_r(&self, d: &DVector<f64>) -> Vec<f64> {
        let iq = self.iq();
        let mut r = vec![0.0; iq];
        for i in (0..iq).rev() {
            let mut s = d[i];
            for k in i + 1..iq {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }

    /// Appends a constraint with `d = Jᵀn`. Returns false when it is linearly
    /// dependent on the active set; the constraint is still appended.
    fn add(&mut self, mut d: DVector<f64>, row: Row, multiplier: f64) -> bool {
        let n = self.n;
        let iq = self.iq();
        for jj in ((iq + 1)..n).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            cc /= h;
            ss /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj - 1)] = a;
                self.j[(k, jj)] = xny * (t1 + a) - t2;
            }
        }
        self.active.push(row);
        self.u.push(multiplier);
        let iq = iq + 1;
        for i in 0..iq.min(n) {
            self.r[(i, iq - 1)] = d[i];
        }
        let diag = if iq - 1 < n { d[iq - 1].abs() } else { 0.0 };
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    fn remove(&mut self, row: Row) {
        let n = self.n;
        let Some(qq) = self.active.iter().position(|a| *a == row) else {
            return;
        };
        let iq = self.iq();
        for i in qq..iq - 1 {
            for jj in 0..n {
                self.r[(jj, i)] = self.r[(jj, i + 1)];
            }
        }
        self.active.remove(qq);
        self.u.remove(qq);
        for jj in 0..n {
            self.r[(jj, iq - 1)] = 0.0;
        }
        let iq = iq - 1;
        if iq == 0 {
            return;
        }
        for jj in qq..iq {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(jj, k)] = a;
                self.r[(jj + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj)] = a;
                self.j[(k, jj + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

fn check_dims(p: &QpProblem<'_>) -> Result<usize, QpError> {
    let n = p.gradient.len();
    let ok = p.hessian.shape() == (n, n)
        && p.a_eq.ncols() == n
        && p.a_eq.nrows() == p.b_eq.len()
        && p.a_in.ncols() == n
        && p.a_in.nrows() == p.b_in.len();
    if !ok {
        return Err(QpError::Dimension(format!(
            "n = {n}, H {:?}, A_eq {:?}, A_in {:?}",
            p.hessian.shape(),
            p.a_eq.shape(),
            p.a_in.shape()
        )));
    }
    Ok(n)
}

pub fn solve_qp(p: &QpProblem<'_>) -> Result<QpSolution, QpError> {
    let n = check_dims(p)?;
    let chol = p.hessian.clone().cholesky().ok_or(QpError::NotConvex)?;
    let j0 = chol.l().transpose().solve_upper_triangular(&DMatrix::identity(n, n)).ok_or(QpError::NotConvex)?;
    let mut excluded = vec![false; p.b_in.len()];
    loop {
        match attempt(p, &chol, &j0, &mut excluded)? {
            Some(sol) => return Ok(sol),
            None => continue,
        }
    }
}

/// One pass of the dual method. Returns `None` after excluding a degenerate
/// inequality, so the caller restarts with a clean factorization.
fn attempt(
    p: &QpProblem<'_>,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    j0: &DMatrix<f64>,
    excluded: &mut [bool],
) -> Result<Option<QpSolution>, QpError> {
    let n = p.gradient.len();
    let m = p.b_in.len();
    let c1 = p.hessian.trace();
    let c2 = j0.trace();
    let mut f =
        Factor { n, j: j0.clone(), r: DMatrix::zeros(n, n + 1), r_norm: 1.0, active: Vec::new(), u: Vec::new() };
    let mut x = chol.solve(&(-p.gradient));
    let mut objective = 0.5 * p.gradient.dot(&x);
    let mut iterations = 0;

    for i in 0..p.b_eq.len() {
        let np: DVector<f64> = p.a_eq.row(i).transpose();
        let d = f.compute_d(&np);
        let z = f.compute_z(&d);
        let r = f.compute_r(&d);
        let t2 = if z.norm_squared() > f64::EPSILON { (p.b_eq[i] - np.dot(&x)) / z.dot(&np) } else { 0.0 };
        x.axpy(t2, &z, 1.0);
        for (k, rk) in r.iter().enumerate() {
            f.u[k] -= t2 * rk;
        }
        objective += 0.5 * t2 * t2 * z.dot(&np);
        if !f.add(d, Row::Eq(i), t2) {
            return Err(QpError::DependentEqualities);
        }
    }

    let slack = |x: &DVector<f64>, i: usize| p.b_in[i] - p.a_in.row(i).dot(&x.transpose());
    let max_iter = 50 * (n + m) + 100;
    let tiny = m as f64 * f64::EPSILON * c1 * c2 * 100.0;

    'outer: loop {
        let mut is_active = vec![false; m];
        for a in &f.active {
            if let Row::In(i) = a {
                is_active[*i] = true;
            }
        }
        let s: Vec<f64> = (0..m).map(|i| slack(&x, i)).collect();
        let psi: f64 = s.iter().map(|v| v.min(0.0)).sum();
        if psi.abs() <= tiny {
            break;
        }
        let mut ip = None;
        let mut worst = 0.0;
        for i in 0..m {
            if !is_active[i] && !excluded[i] && s[i] < worst {
                worst = s[i];
                ip = Some(i);
            }
        }
        let Some(ip) = ip else { break };
        let np: DVector<f64> = -p.a_in.row(ip).transpose();
        let mut s_ip = s[ip];
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let d = f.compute_d(&np);
            let z = f.compute_z(&d);
            let r = f.compute_r(&d);
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..f.iq() {
                if let Row::In(idx) = f.active[k] {
                    if r[k] > 0.0 && f.u[k] / r[k] < t1 {
                        t1 = f.u[k] / r[k];
                        drop = Some(idx);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.norm_squared() > f64::EPSILON { -s_ip / zn } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                for (k, rk) in r.iter().enumerate() {
                    f.u[k] -= t * rk;
                }
                u_new += t;
                f.remove(Row::In(drop.expect("finite dual step has a blocking constraint")));
                continue;
            }
            x.axpy(t, &z, 1.0);
            objective += t * zn * (0.5 * t + u_new);
            for (k, rk) in r.iter().enumerate() {
                f.u[k] -= t * rk;
            }
            u_new += t;
            if t == t2 {
                if !f.add(d, Row::In(ip), u_new) {
                    excluded[ip] = true;
                    return Ok(None);
                }
                continue 'outer;
            }
            f.remove(Row::In(drop.expect("partial step has a blocking constraint")));
            s_ip = slack(&x, ip);
        }
    }

    let scale = 1.0 + p.b_in.amax().max(x.amax());
    for i in 0..m {
        if excluded[i] && slack(&x, i) < -1e-9 * scale {
            return Err(QpError::Infeasible);
        }
    }
    let mut eq_multipliers = DVector::zeros(p.b_eq.len());
    let mut ineq_multipliers = DVector::zeros(m);
    let mut active = Vec::new();
    for (row, u) in f.active.iter().zip(&f.u) {
        match row {
            Row::Eq(i) => eq_multipliers[*i] = -u,
            Row::In(i) => {
                ineq_multipliers[*i] = *u;
                active.push(*i);
            }
        }
    }
    active.sort_unstable();
    Ok(Some(QpSolution { x, objective, eq_multipliers, ineq_multipliers, active, iterations }))
}

/// Convenience wrapper for problems without equality rows.
pub fn solve_inequality_qp(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = gradient.len();
    let a_eq = DMatrix::zeros(0, n);
    let b_eq = DVector::zeros(0);
    solve_qp(&QpProblem { hessian, gradient, a_eq: &a_eq, b_eq: &b_eq, a_in, b_in })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![-1.0, 1.0]);
        let sol = solve_inequality_qp(&h, &g, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        assert!((&h * &sol.x + &g).amax() < 1e-12);
    }

    #[test]
    fn box_clips_solution() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![-3.0, 0.5]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_element(4, 1.0);
        let sol = solve_inequality_qp(&h, &g, &a, &b).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.x[1] + 0.5).abs() < 1e-12);
        assert_eq!(sol.active, vec![0]);
        assert!((sol.ineq_multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equality_and_inequality() {
        let h = DMatrix::identity(3, 3);
        let g = DVector::zeros(3);
        let a_eq = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b_eq = DVector::from_vec(vec![3.0]);
        let a_in = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let b_in = DVector::from_vec(vec![0.5]);
        let sol =
            solve_qp(&QpProblem { hessian: &h, gradient: &g, a_eq: &a_eq, b_eq: &b_eq, a_in: &a_in, b_in: &b_in })
                .unwrap();
        assert!((&sol.x - DVector::from_vec(vec![0.5, 1.25, 1.25])).amax() < 1e-12);
        let kkt = &h * &sol.x + &g + a_eq.transpose() * &sol.eq_multipliers + a_in.transpose() * &sol.ineq_multipliers;
        assert!(kkt.amax() < 1e-12);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]);
        assert_eq!(solve_inequality_qp(&h, &g, &a, &b), Err(QpError::Infeasible));
    }

    #[test]
    fn indefinite_hessian_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let g = DVector::zeros(2);
        let r = solve_inequality_qp(&h, &g, &DMatrix::zeros(0, 2), &DVector::zeros(0));
        assert_eq!(r, Err(QpError::NotConvex));
    }
}
