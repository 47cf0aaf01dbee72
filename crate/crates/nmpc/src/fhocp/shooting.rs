use cotrans_core::constraints::{ConstraintResiduals, ResidualLabel};
use cotrans_core::ModelError;
use nalgebra::{DMatrix, DVector};

use super::HorizonGrid;
use crate::ode::rk4;
use crate::sqp::{fill_column, finish_gradient, Derivatives, Evaluation, FdScheme, NlpError, NlpProblem};

/// Continuous-time ingredients of one finite-horizon problem.
///
/// Costs are given as residual vectors `r` with the cost value `‖r‖²`.
pub trait HorizonModel {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
    /// Running cost `F(x, u)` on interval `k`.
    fn running_residual(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
    /// Terminal cost at node `K`.
    fn terminal_residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
    /// Extra pointwise cost at node `k` in `1..=K`.
    fn node_residual(&self, _k: usize, _x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(DVector::zeros(0))
    }
    /// Input constraints on interval `k`; `u_prev` is the control of interval
    /// `k - 1`, or the last applied control for `k = 0`.
    fn interval_constraints(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        u_prev: &DVector<f64>,
    ) -> Result<ConstraintResiduals<f64>, ModelError>;
    /// State constraints at node `k` in `1..=K`.
    fn node_constraints(&self, k: usize, x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError>;
    fn terminal_constraints(&self, _x: &DVector<f64>) -> Result<ConstraintResiduals<f64>, ModelError> {
        Ok(ConstraintResiduals::new())
    }
}

/// Single-shooting NLP over the stacked controls `z = [u_0; …; u_{K-1}]`.
pub struct ShootingProblem<'m, M: HorizonModel + ?Sized> {
    pub model: &'m M,
    pub grid: HorizonGrid,
    pub x0: DVector<f64>,
    pub u_prev: DVector<f64>,
    pub fd: FdScheme,
}

struct Block {
    residual: DVector<f64>,
    ineq: DVector<f64>,
    labels: Vec<ResidualLabel>,
}

impl<'m, M: HorizonModel + ?Sized> ShootingProblem<'m, M> {
    pub fn new(model: &'m M, grid: HorizonGrid, x0: DVector<f64>, u_prev: DVector<f64>) -> Self {
        Self { model, grid, x0, u_prev, fd: FdScheme::Forward }
    }

    pub fn control(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        let m = self.model.control_dim();
        z.rows(k * m, m).into_owned()
    }

    pub fn stack(controls: &[DVector<f64>]) -> DVector<f64> {
        let mut z = Vec::new();
        for u in controls {
            z.extend(u.iter().copied());
        }
        DVector::from_vec(z)
    }

    pub fn unstack(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.grid.intervals).map(|k| self.control(z, k)).collect()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        rk4(|s| self.model.dynamics(s, u), x, self.grid.h, self.grid.substeps)
    }

    /// States at nodes `0..=K`.
    pub fn rollout(&self, z: &DVector<f64>) -> Result<Vec<DVector<f64>>, ModelError> {
        let mut states = vec![self.x0.clone()];
        for k in 0..self.grid.intervals {
            let next = self.step(&states[k], &self.control(z, k))?;
            states.push(next);
        }
        Ok(states)
    }

    fn propagate(&self, states: &mut [DVector<f64>], z: &DVector<f64>, from: usize) -> Result<(), ModelError> {
        for k in from..self.grid.intervals {
            states[k + 1] = self.step(&states[k], &self.control(z, k))?;
        }
        Ok(())
    }

    fn block(&self, k: usize, states: &[DVector<f64>], z: &DVector<f64>) -> Result<Block, ModelError> {
        let w = (0.5 * self.grid.h).sqrt();
        let u = self.control(z, k);
        let u_prev = if k == 0 { self.u_prev.clone() } else { self.control(z, k - 1) };
        let r0 = self.model.running_residual(k, &states[k], &u)? * w;
        let r1 = self.model.running_residual(k, &states[k + 1], &u)? * w;
        let rn = self.model.node_residual(k + 1, &states[k + 1])?;
        let mut ic = self.model.interval_constraints(k, &states[k], &u, &u_prev)?;
        ic.extend(self.model.node_constraints(k + 1, &states[k + 1])?);
        let residual = DVector::from_iterator(
            r0.len() + r1.len() + rn.len(),
            r0.iter().chain(r1.iter()).chain(rn.iter()).copied(),
        );
        Ok(Block {
            residual,
            ineq: DVector::from_iterator(ic.len(), ic.values()),
            labels: ic.entries.iter().map(|e| e.0).collect(),
        })
    }

    fn terminal_block(&self, x: &DVector<f64>) -> Result<Block, ModelError> {
        let tc = self.model.terminal_constraints(x)?;
        Ok(Block {
            residual: self.model.terminal_residual(x)?,
            ineq: DVector::from_iterator(tc.len(), tc.values()),
            labels: tc.entries.iter().map(|e| e.0).collect(),
        })
    }

    fn blocks(&self, states: &[DVector<f64>], z: &DVector<f64>, from: usize) -> Result<Vec<Block>, ModelError> {
        let mut out = Vec::with_capacity(self.grid.intervals + 1 - from);
        for k in from..self.grid.intervals {
            out.push(self.block(k, states, z)?);
        }
        out.push(self.terminal_block(&states[self.grid.intervals])?);
        Ok(out)
    }

    fn concat(blocks: &[Block]) -> Evaluation {
        let residual: Vec<f64> = blocks.iter().flat_map(|b| b.residual.iter().copied()).collect();
        let ineq: Vec<f64> = blocks.iter().flat_map(|b| b.ineq.iter().copied()).collect();
        let r = DVector::from_vec(residual);
        Evaluation {
            objective: r.norm_squared(),
            residuals: Some(r),
            ineq: DVector::from_vec(ineq),
            eq: DVector::zeros(0),
        }
    }

    /// Running cost of interval `k` under the trapezoid rule.
    pub fn stage_cost(&self, z: &DVector<f64>, states: &[DVector<f64>], k: usize) -> Result<f64, ModelError> {
        let u = self.control(z, k);
        let a = self.model.running_residual(k, &states[k], &u)?.norm_squared();
        let b = self.model.running_residual(k, &states[k + 1], &u)?.norm_squared();
        Ok(0.5 * self.grid.h * (a + b))
    }

    /// Constraint labels in the order of [`Evaluation::ineq`], tagged with the
    /// interval (`k`) or `K` for terminal rows.
    pub fn labels(&self, z: &DVector<f64>) -> Result<Vec<(usize, ResidualLabel)>, ModelError> {
        let states = self.rollout(z)?;
        let blocks = self.blocks(&states, z, 0)?;
        Ok(blocks.iter().enumerate().flat_map(|(k, b)| b.labels.iter().map(move |l| (k, *l))).collect())
    }

    /// Largest constraint residual with its label.
    pub fn worst_constraint(&self, z: &DVector<f64>, ineq: &DVector<f64>) -> Option<(String, f64)> {
        let labels = self.labels(z).ok()?;
        let (i, v) = ineq.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b >= *v => best,
            _ => Some((i, *v)),
        })?;
        let (k, l) = labels.get(i)?;
        Some((format!("k{k}:{l}"), v))
    }
}

impl<M: HorizonModel + ?Sized> NlpProblem for ShootingProblem<'_, M> {
    fn num_vars(&self) -> usize {
        self.grid.intervals * self.model.control_dim()
    }

    fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation, NlpError> {
        if z.len() != self.num_vars() {
            return Err(NlpError::Dimension(format!("expected {} controls, got {}", self.num_vars(), z.len())));
        }
        let states = self.rollout(z)?;
        Ok(Self::concat(&self.blocks(&states, z, 0)?))
    }

    /// Finite differences that re-simulate only from the perturbed interval on.
    fn derivatives(&self, z: &DVector<f64>, at: &Evaluation) -> Result<Derivatives, NlpError> {
        let n = self.num_vars();
        let m = self.model.control_dim();
        let kk = self.grid.intervals;
        let states = self.rollout(z)?;
        let nominal = self.blocks(&states, z, 0)?;
        let res_off: Vec<usize> = offsets(nominal.iter().map(|b| b.residual.len()));
        let ineq_off: Vec<usize> = offsets(nominal.iter().map(|b| b.ineq.len()));
        let nr = *res_off.last().expect("offsets are non-empty");
        let ni = *ineq_off.last().expect("offsets are non-empty");
        if at.residuals.as_ref().map(|r| r.len()) != Some(nr) || at.ineq.len() != ni {
            return Err(NlpError::Dimension("evaluation layout changed between calls".into()));
        }
        let mut d = Derivatives {
            gradient: DVector::zeros(n),
            residual_jacobian: Some(DMatrix::zeros(nr, n)),
            ineq_jacobian: DMatrix::zeros(ni, n),
            eq_jacobian: DMatrix::zeros(0, n),
        };

        let perturbed = |i: usize, delta: f64| -> Result<Evaluation, NlpError> {
            let j = i / m;
            let mut zp = z.clone();
            zp[i] += delta;
            let mut sp = states.clone();
            self.propagate(&mut sp, &zp, j)?;
            let tail = self.blocks(&sp, &zp, j)?;
            let mut residual = at.residuals.clone().expect("shooting evaluations carry residuals");
            let mut ineq = at.ineq.clone();
            for (b, blk) in tail.iter().enumerate() {
                let k = j + b;
                if blk.residual.len() != res_off[k + 1] - res_off[k] || blk.ineq.len() != ineq_off[k + 1] - ineq_off[k]
                {
                    return Err(NlpError::Dimension("constraint count changed under perturbation".into()));
                }
                residual.rows_mut(res_off[k], blk.residual.len()).copy_from(&blk.residual);
                ineq.rows_mut(ineq_off[k], blk.ineq.len()).copy_from(&blk.ineq);
            }
            Ok(Evaluation {
                objective: residual.norm_squared(),
                residuals: Some(residual),
                ineq,
                eq: DVector::zeros(0),
            })
        };

        for i in 0..n {
            let h = self.fd.step(z[i]);
            let plus = perturbed(i, h)?;
            match self.fd {
                FdScheme::Forward => fill_column(&mut d, i, &plus, at, h)?,
                FdScheme::Central => {
                    let minus = perturbed(i, -h)?;
                    fill_column(&mut d, i, &plus, &minus, 2.0 * h)?;
                }
            }
        }
        debug_assert_eq!(kk + 1, nominal.len());
        finish_gradient(&mut d, at);
        Ok(d)
    }
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for s in sizes {
        out.push(out.last().copied().unwrap_or(0) + s);
    }
    out
}
