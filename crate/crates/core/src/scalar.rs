//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the numeric code is generic over: `f32` or `f64`.
///
/// Reductions accumulate in `f64` regardless of the storage type; see
/// [`crate::tensor`].
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Widen to `f64` for accumulation.
    #[inline(always)]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Narrow from `f64` after accumulation.
    #[inline(always)]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable scalar")
    }
}

impl Real for f32 {
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
}
