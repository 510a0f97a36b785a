//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// floating point: f32 or f64
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; every implementor can represent any finite f64 approximately.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is convertible to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar is convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
