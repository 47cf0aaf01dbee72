//! Rotations, Euler-angle rate maps, skew matrices and ellipsoid geometry.
//!
//! Orientation uses x-y-z Euler angles `(phi, theta, psi)` with
//! `R = Rx(phi) * Ry(theta) * Rz(psi)`. With this composition the world-frame
//! angular velocity is `omega = J(eta) * eta_dot` where `J` is
//! [`euler_rate_jacobian`].

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{ModelError, ModelResult};
use crate::real::Real;

/// `S(a)` such that `S(a) b = a × b`.
pub fn skew<T: Real>(a: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -a.z, a.y, a.z, z, -a.x, -a.y, a.x, z)
}

/// Inverse of [`skew`] on antisymmetric input (uses the antisymmetric part otherwise).
pub fn unskew<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half = T::c(0.5);
    Vector3::new((m[(2, 1)] - m[(1, 2)]) * half, (m[(0, 2)] - m[(2, 0)]) * half, (m[(1, 0)] - m[(0, 1)]) * half)
}

pub fn rot_x<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(l, o, o, o, c, -s, o, s, c)
}

pub fn rot_y<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(c, o, s, o, l, o, -s, o, c)
}

pub fn rot_z<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(c, -s, o, s, c, o, o, o, l)
}

/// Rotation by `angle` about the unit vector `axis` (Rodrigues).
pub fn rot_axis<T: Real>(axis: &Vector3<T>, angle: T) -> Matrix3<T> {
    let k = skew(axis);
    let (s, c) = angle.sin_cos();
    Matrix3::identity() + k * s + k * k * (T::one() - c)
}

/// x-y-z Euler angles. Stored unwrapped; see [`EulerAngles::in_domain`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles<T: Real> {
    pub phi: T,
    pub theta: T,
    pub psi: T,
}

impl<T: Real> EulerAngles<T> {
    pub fn new(phi: T, theta: T, psi: T) -> Self {
        Self { phi, theta, psi }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_vector(v: &Vector3<T>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_vector(&self) -> Vector3<T> {
        Vector3::new(self.phi, self.theta, self.psi)
    }

    pub fn rotation(&self) -> Matrix3<T> {
        rot_xyz(self)
    }

    /// Recovers angles from a rotation matrix, choosing `theta` in `[-pi/2, pi/2]`.
    pub fn from_rotation(r: &Matrix3<T>) -> Self {
        let s = r[(0, 2)].clamp(-T::one(), T::one());
        let theta = s.asin();
        let phi = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let psi = (-r[(0, 1)]).atan2(r[(0, 0)]);
        Self::new(phi, theta, psi)
    }

    /// Membership in `(-pi, pi) x (-pi/2, pi/2) x (-pi, pi)` after wrapping
    /// `phi` and `psi` into `(-pi, pi]`.
    pub fn in_domain(&self) -> bool {
        let half_pi = T::frac_pi_2();
        let pi = T::pi();
        let wp = wrap_angle(self.phi);
        let ws = wrap_angle(self.psi);
        self.theta > -half_pi && self.theta < half_pi && wp > -pi && wp < pi && ws > -pi && ws < pi
    }
}

impl<T: Real> std::ops::Add for EulerAngles<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.phi + rhs.phi, self.theta + rhs.theta, self.psi + rhs.psi)
    }
}

/// Wraps into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::two_pi();
    let pi = T::pi();
    let mut w = (a + pi) % two_pi;
    if w <= T::zero() {
        w += two_pi;
    }
    w - pi
}

/// Rotation matrix of x-y-z Euler angles, `Rx(phi) Ry(theta) Rz(psi)`.
pub fn rot_xyz<T: Real>(eta: &EulerAngles<T>) -> Matrix3<T> {
    rot_x(eta.phi) * rot_y(eta.theta) * rot_z(eta.psi)
}

/// Representation Jacobian mapping Euler-angle rates to world angular velocity.
pub fn euler_rate_jacobian<T: Real>(eta: &EulerAngles<T>) -> Matrix3<T> {
    let (sp, cp) = eta.phi.sin_cos();
    let (st, ct) = eta.theta.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(l, o, st, o, cp, -ct * sp, o, sp, ct * cp)
}

/// Inverse of [`euler_rate_jacobian`]; fails at `theta = ±pi/2`.
pub fn euler_rate_jacobian_inverse<T: Real>(eta: &EulerAngles<T>) -> ModelResult<Matrix3<T>> {
    let ct = eta.theta.cos();
    if ct.abs() <= T::tol(1e-9) {
        return Err(ModelError::RepresentationSingularity {
            theta: nalgebra::try_convert(eta.theta).unwrap_or(f64::NAN),
        });
    }
    let (sp, cp) = eta.phi.sin_cos();
    let st = eta.theta.sin();
    let (o, l) = (T::zero(), T::one());
    Ok(Matrix3::new(l, sp * st / ct, -cp * st / ct, o, cp, sp, o, -sp / ct, cp / ct))
}

/// `{ p : (p - center)ᵀ shape (p - center) <= 1 }`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid<T: Real> {
    pub center: Vector3<T>,
    pub shape: Matrix3<T>,
}

impl<T: Real> Ellipsoid<T> {
    pub fn new(center: Vector3<T>, shape: Matrix3<T>) -> Self {
        Self { center, shape }
    }

    pub fn sphere(center: Vector3<T>, radius: T) -> Self {
        Self::new(center, Matrix3::identity() / (radius * radius))
    }

    /// Semi-axes along the columns of `orientation`.
    pub fn from_semi_axes(center: Vector3<T>, semi_axes: Vector3<T>, orientation: &Matrix3<T>) -> Self {
        let d = Matrix3::from_diagonal(&semi_axes.map(|b| T::one() / (b * b)));
        Self::new(center, orientation * d * orientation.transpose())
    }

    /// Same body moved by a rigid transform `p -> origin + rotation * p`.
    pub fn transformed(&self, origin: &Vector3<T>, rotation: &Matrix3<T>) -> Self {
        Self::new(origin + rotation * self.center, rotation * self.shape * rotation.transpose())
    }

    /// `(p - c)ᵀ P (p - c)`; at most one inside.
    pub fn level(&self, p: &Vector3<T>) -> T {
        let d = p - self.center;
        d.dot(&(self.shape * d))
    }

    pub fn contains(&self, p: &Vector3<T>) -> bool {
        self.level(p) <= T::one()
    }

    /// Symmetric within 1e-12 (relative) and positive definite.
    pub fn validate(&self) -> ModelResult<()> {
        let asym = (self.shape - self.shape.transpose()).amax();
        let scale = self.shape.amax().max(T::one());
        if !(asym <= T::tol(1e-12) * scale) {
            return Err(ModelError::InvalidGeometry("ellipsoid shape matrix is not symmetric".into()));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(ModelError::InvalidGeometry("ellipsoid center is not finite".into()));
        }
        if self.shape.cholesky().is_none() {
            return Err(ModelError::InvalidGeometry("ellipsoid shape matrix is not positive definite".into()));
        }
        Ok(())
    }

    /// Mean squared semi-axis, `3 / trace(P)`; the squared radius for a sphere.
    pub fn mean_square_radius(&self) -> T {
        T::c(3.0) / self.shape.trace()
    }
}

/// `min { (p - c_a)ᵀ P_a (p - c_a) : p ∈ b } - 1`.
///
/// Non-positive exactly when the two ellipsoids intersect. The minimizer is
/// found through the multiplier `mu` of the boundary constraint of `b`: after
/// simultaneously diagonalising `P_a` and `P_b` the boundary condition becomes
/// the scalar convex decreasing equation
/// `sum_i lambda_i s_i² / (1 + mu lambda_i)² = 1`, solved by Newton from `mu = 0`.
pub fn ellipsoid_margin<T: Real>(a: &Ellipsoid<T>, b: &Ellipsoid<T>) -> ModelResult<T> {
    a.validate()?;
    b.validate()?;
    margin_unchecked(a, b)
}

/// [`ellipsoid_margin`] without re-validating the shape matrices.
pub fn margin_unchecked<T: Real>(a: &Ellipsoid<T>, b: &Ellipsoid<T>) -> ModelResult<T> {
    let d = a.center - b.center;
    if d.dot(&(b.shape * d)) <= T::one() {
        return Ok(-T::one());
    }
    let chol = a
        .shape
        .cholesky()
        .ok_or_else(|| ModelError::InvalidGeometry("shape matrix is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l.try_inverse().ok_or_else(|| ModelError::InvalidGeometry("degenerate shape matrix".into()))?;
    // P_a = L Lᵀ; in y = Lᵀ x the first ellipsoid is the unit ball.
    let pb = l_inv * b.shape * l_inv.transpose();
    let pb = (pb + pb.transpose()) * T::c(0.5);
    let eig = SymmetricEigen::new(pb);
    let lam = eig.eigenvalues;
    let s = eig.eigenvectors.transpose() * (l.transpose() * d);

    let phi = |mu: T| -> (T, T) {
        let mut f = -T::one();
        let mut df = T::zero();
        for i in 0..3 {
            let den = T::one() + mu * lam[i];
            let t = lam[i] * s[i] * s[i] / (den * den);
            f += t;
            df -= T::c(2.0) * t * lam[i] / den;
        }
        (f, df)
    };

    let tol = T::tol(1e-10);
    let mut mu = T::zero();
    let (mut f, mut df) = phi(mu);
    for _ in 0..500 {
        if df >= T::zero() {
            break;
        }
        let next = mu - f / df;
        if !(next > mu) {
            break;
        }
        mu = next;
        let (nf, ndf) = phi(mu);
        let settled = nf.abs() <= tol && nf.abs() >= f.abs() * T::c(0.5);
        f = nf;
        df = ndf;
        if settled || f.abs() <= T::default_epsilon() {
            break;
        }
    }
    if !(f.abs() <= tol) {
        return Err(ModelError::InvalidGeometry(format!(
            "ellipsoid margin multiplier did not converge (residual {:?})",
            f
        )));
    }
    let mut m = T::zero();
    for i in 0..3 {
        let r = mu * lam[i] / (T::one() + mu * lam[i]);
        m += s[i] * s[i] * r * r;
    }
    Ok(m - T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&v(0.0, 0.0, 0.0)), Matrix3::zeros());
        assert_eq!(skew(&v(1.0, 0.0, 0.0)) * v(0.0, 1.0, 0.0), v(0.0, 0.0, 1.0));
        let a = v(1.0, 2.0, 3.0);
        assert_eq!(skew(&a) * a, Vector3::zeros());
        assert_eq!(unskew(&skew(&a)), a);
    }

    #[test]
    fn rot_xyz_examples() {
        assert_eq!(rot_xyz(&EulerAngles::new(0.0, 0.0, 0.0)), Matrix3::identity());
        let r = rot_xyz(&EulerAngles::new(0.3f64, -0.2, 1.1));
        assert!((r.transpose() * r - Matrix3::identity()).amax() <= 1e-12);
        assert!((r.determinant() - 1.0).abs() <= 1e-12);
        let r = rot_xyz(&EulerAngles::new(FRAC_PI_2, 0.0, 0.0));
        assert!((r * v(0.0, 1.0, 0.0) - v(0.0, 0.0, 1.0)).amax() <= 1e-15);
    }

    #[test]
    fn euler_round_trip() {
        let e = EulerAngles::new(0.7, -1.2, 2.5);
        let back = EulerAngles::from_rotation(&e.rotation());
        assert!((back.to_vector() - e.to_vector()).amax() < 1e-12);
    }

    #[test]
    fn rate_jacobian_identity_at_zero_and_inverse() {
        assert_eq!(euler_rate_jacobian(&EulerAngles::<f64>::zero()), Matrix3::identity());
        let e = EulerAngles::new(0.4, 0.9, -2.0);
        let j = euler_rate_jacobian(&e);
        let ji = euler_rate_jacobian_inverse(&e).unwrap();
        assert!((j * ji - Matrix3::identity()).amax() < 1e-12);
        assert!(euler_rate_jacobian_inverse(&EulerAngles::new(0.1, FRAC_PI_2, 0.0)).is_err());
    }

    #[test]
    fn wrap_and_domain() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5f64) + 0.5).abs() < 1e-15);
        assert!(EulerAngles::new(4.0, 0.1, -4.0).in_domain());
        assert!(!EulerAngles::new(0.0, FRAC_PI_2, 0.0).in_domain());
    }

    #[test]
    fn margin_examples() {
        let a = Ellipsoid::sphere(v(0.0, 0.0, 0.0), 1.0);
        assert_eq!(ellipsoid_margin(&a, &a).unwrap(), -1.0);
        let b = Ellipsoid::sphere(v(3.0, 0.0, 0.0), 1.0);
        assert!((ellipsoid_margin(&a, &b).unwrap() - 3.0).abs() < 1e-10);
        let big = Ellipsoid::sphere(v(0.5, 0.0, 0.0), 2.0);
        assert!(ellipsoid_margin(&a, &big).unwrap() < 0.0);
    }

    #[test]
    fn margin_rejects_non_spd() {
        let bad = Ellipsoid::new(v(0.0, 0.0, 0.0), Matrix3::from_diagonal(&v(1.0, -1.0, 1.0)));
        let ok = Ellipsoid::sphere(v(3.0, 0.0, 0.0), 1.0);
        assert!(matches!(ellipsoid_margin(&bad, &ok), Err(ModelError::InvalidGeometry(_))));
        let asym = Ellipsoid::new(v(0.0, 0.0, 0.0), Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0));
        assert!(ellipsoid_margin(&ok, &asym).is_err());
    }

    #[test]
    fn margin_single_precision() {
        let a = Ellipsoid::<f32>::sphere(Vector3::new(0.0, 0.0, 0.0), 0.5);
        let b = Ellipsoid::<f32>::sphere(Vector3::new(2.0, 0.0, 0.0), 1.0);
        let m = ellipsoid_margin(&a, &b).unwrap();
        assert!((m - 3.0).abs() < 1e-4);
    }
}
