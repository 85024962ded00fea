//! Scalar abstraction shared by the geometric kernels.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating-point scalar the geometry and estimation code is generic over.
///
/// Implemented for `f32` and `f64`. Everything that touches files or the
/// end-to-end pipeline works in `f64`.
pub trait Real: RealField + Copy + ToPrimitive + Send + Sync + 'static {}

impl<T> Real for T where T: RealField + Copy + ToPrimitive + Send + Sync + 'static {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(value: f64) -> T {
    nalgebra::convert(value)
}

#[inline]
pub(crate) fn to_f64<T: Real>(value: T) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

/// Machine epsilon of `T`.
#[inline]
pub(crate) fn epsilon<T: Real>() -> T {
    T::default_epsilon()
}
