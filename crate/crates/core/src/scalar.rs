//! Real scalar abstraction shared by the numerical modules.

use std::fmt;

use nalgebra::RealField;

/// Floating-point type the simulator can run on.
///
/// Complex amplitudes and operator entries are `Complex<T>` for `T: Real`.
pub trait Real: RealField + Copy + fmt::LowerExp + Send + Sync + 'static {
    /// Converts an `f64` literal into this type.
    #[inline]
    fn of(x: f64) -> Self {
        nalgebra::convert(x)
    }

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }

    fn of_i64(n: i64) -> Self {
        Self::of(n as f64)
    }

    fn as_f64(self) -> f64;

    /// Machine epsilon of the type.
    fn eps() -> Self;
}

impl Real for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn eps() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn eps() -> Self {
        f32::EPSILON
    }
}
