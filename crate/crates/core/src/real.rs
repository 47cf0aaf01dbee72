//! Scalar abstraction shared by every model in the crate.

use nalgebra as na;
use num_traits as nt;

/// Floating-point scalar the kinematic and dynamic models are written against.
///
/// Both `f32` and `f64` qualify. Iterative routines scale their stopping
/// tolerances through [`Real::tol`] so that single precision does not spin on
/// thresholds it cannot reach.
pub trait Real: Copy + na::RealField + nt::FloatConst + nt::FromPrimitive {
    /// Converts a literal. Panics only if the target type cannot hold finite f64 values.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// `max(requested, 100 * machine epsilon)`.
    #[inline]
    fn tol(requested: f64) -> Self {
        let floor = Self::default_epsilon() * Self::c(100.0);
        let req = Self::c(requested);
        if req > floor {
            req
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
