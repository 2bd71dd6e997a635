//! Scalar abstraction shared by every numeric module.
//!
//! Training stores parameters in `f32`; gradient checks run the same code in
//! `f64`. Anything that is a `num_traits::Float` with the usual assignment
//! operators qualifies.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type for tensors, parameters and embeddings.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and sampled values.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Inner product of two equal-length slices, accumulated left to right.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Squared L2 norm accumulated in `f64` so large parameter sets stay stable.
pub fn sum_squares<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|&x| {
        let v = x.as_f64();
        v * v
    }).sum()
}
