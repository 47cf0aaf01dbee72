//! Small models with independently known optima.
#![allow(dead_code)]

pub mod team;

use cotrans_core::constraints::{ConstraintResiduals, ResidualLabel, Side};
use cotrans_core::ModelError;
use cotrans_nmpc::fhocp::HorizonModel;
use nalgebra::{DMatrix, DVector};

/// `ẋ = A x + B u` with cost `xᵀQx + uᵀRu` and terminal `xᵀPx`.
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

fn chol_t(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().unwrap().l().transpose()
}

impl LinearModel {
    pub fn oscillator() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]),
            b: DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 1.0, 0.0]),
            q: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            r: DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.8]),
            p: DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]),
        }
    }

    /// Exact one-interval map of `substeps` RK4 steps: `x⁺ = Φ x + Γ u`.
    pub fn discretize(&self, h: f64, substeps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.a.nrows();
        let dt = h / substeps as f64;
        let i = DMatrix::identity(n, n);
        let ad = &self.a * dt;
        let ad2 = &ad * &ad;
        let ad3 = &ad2 * &ad;
        let m = &i + &ad + &ad2 / 2.0 + &ad3 / 6.0 + &ad3 * &ad / 24.0;
        let nn = (&i * dt + &ad * (dt / 2.0) + &ad2 * (dt / 6.0) + &ad3 * (dt / 24.0)) * &self.b;
        let mut phi = i.clone();
        let mut gam = DMatrix::zeros(n, self.b.ncols());
        for _ in 0..substeps {
            gam = &m * gam + &nn;
            phi = &m * phi;
        }
        (phi, gam)
    }

    /// Optimal controls and cost of the trapezoid-discretized problem by a
    /// backward Riccati recursion with cross terms.
    pub fn riccati(&self, x0: &DVector<f64>, h: f64, intervals: usize, substeps: usize) -> (Vec<DVector<f64>>, f64) {
        let (phi, gam) = self.discretize(h, substeps);
        let qx = (&self.q + phi.transpose() * &self.q * &phi) * (h / 2.0);
        let qu = &self.r * h + gam.transpose() * &self.q * &gam * (h / 2.0);
        let qxu = phi.transpose() * &self.q * &gam * (h / 2.0);
        let mut s = self.p.clone();
        let mut gains = Vec::new();
        for _ in 0..intervals {
            let huu = &qu + gam.transpose() * &s * &gam;
            let hux = qxu.transpose() + gam.transpose() * &s * &phi;
            let hxx = &qx + phi.transpose() * &s * &phi;
            let huu_inv = huu.clone().try_inverse().unwrap();
            let k = -&huu_inv * &hux;
            s = &hxx - hux.transpose() * &huu_inv * &hux;
            s = (&s + s.transpose()) / 2.0;
            gains.push(k);
        }
        gains.reverse();
        let mut x = x0.clone();
        let mut us = Vec::new();
        for k in &gains {
            let u = k * &x;
            x = &phi * &x + &gam * &u;
            us.push(u);
        }
        (us, x0.dot(&(&s * x0)))
    }
}

impl HorizonModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(&self.a * x + &self.b * u)
    }
    fn running_residual(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let rx = chol_t(&self.q) * x;
        let ru = chol_t(&self.r) * u;
        Ok(DVector::from_iterator(rx.len() + ru.len(), rx.iter().chain(ru.iter()).copied()))
    }
    fn terminal_residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(chol_t(&self.p) * x)
    }
    fn interval_constraints(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _u_prev: &DVector<f64>,
    ) -> Result<ConstraintResiduals<f64>, ModelError> {
        Ok(ConstraintResiduals::new())
    }
    fn node_constraints(&self, _k: usize, _x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError> {
        Ok(ConstraintResiduals::new())
    }
}

/// Damped pendulum with two inputs in the unit box, pulled toward a target
/// it cannot reach in one interval.
pub struct BoxPendulum {
    pub target: DVector<f64>,
    pub bound: f64,
}

impl BoxPendulum {
    pub fn new() -> Self {
        Self { target: DVector::from_vec(vec![0.9, 0.1]), bound: 1.0 }
    }
}

impl HorizonModel for BoxPendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(DVector::from_vec(vec![x[1] + 0.5 * u[1], -x[0].sin() - 0.3 * x[1] + 2.0 * u[0]]))
    }
    fn running_residual(&self, _k: usize, _x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(u * 0.3)
    }
    fn terminal_residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok((x - &self.target) * 3.0)
    }
    fn interval_constraints(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        _u_prev: &DVector<f64>,
    ) -> Result<ConstraintResiduals<f64>, ModelError> {
        let mut r = ConstraintResiduals::new();
        for (c, &v) in u.iter().enumerate() {
            r.push(ResidualLabel::InputBox { component: c, side: Side::Upper }, v - self.bound);
            r.push(ResidualLabel::InputBox { component: c, side: Side::Lower }, -v - self.bound);
        }
        Ok(r)
    }
    fn node_constraints(&self, _k: usize, _x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError> {
        Ok(ConstraintResiduals::new())
    }
}
