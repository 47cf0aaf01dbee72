use nalgebra::DVector;

/// Classic fourth-order Runge–Kutta over `dt` split into `substeps` equal steps.
pub fn rk4<E, F>(f: F, x: &DVector<f64>, dt: f64, substeps: usize) -> Result<DVector<f64>, E>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let n = substeps.max(1);
    let hs = dt / n as f64;
    let mut x = x.clone();
    for _ in 0..n {
        let k1 = f(&x)?;
        let k2 = f(&(&x + &k1 * (0.5 * hs)))?;
        let k3 = f(&(&x + &k2 * (0.5 * hs)))?;
        let k4 = f(&(&x + &k3 * hs))?;
        x += (k1 + (k2 + k3) * 2.0 + k4) * (hs / 6.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let x = rk4::<(), _>(|x| Ok(-x), &DVector::from_vec(vec![1.0]), 1.0, 10).unwrap();
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-6);
    }
}
