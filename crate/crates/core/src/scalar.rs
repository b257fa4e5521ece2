//! Scalar abstraction shared by the geometric and numerical modules.

use nalgebra as na;
use num_traits as nt;

/// Real scalar type the geometry, codec and bundle-adjustment code is generic over.
///
/// Implemented for `f32` and `f64`. The crate root exposes `f64` aliases for
/// every generic type, which is what the pipeline uses.
pub trait Real:
    na::RealField
    + Copy
    + nt::FloatConst
    + nt::FromPrimitive
    + nt::ToPrimitive
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
    + Send
    + Sync
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self;

    /// Lossy conversion to `f64`.
    fn as_f64(self) -> f64;

    /// Tolerance used when validating rotation matrices.
    fn orthonormal_tolerance() -> Self;
}

macro_rules! impl_real {
    ($f:ty, $tol:expr) => {
        impl Real for $f {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $f
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn orthonormal_tolerance() -> Self {
                $tol
            }
        }
    };
}

impl_real!(f32, 1e-4);
impl_real!(f64, 1e-9);
