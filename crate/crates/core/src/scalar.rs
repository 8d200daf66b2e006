//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sums `values` in ascending order of their bit-level total ordering.
///
/// The result depends only on the multiset of inputs, not their order.
pub fn order_free_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| {
        a.partial_cmp(b)
            .unwrap_or_else(|| a.is_nan().cmp(&b.is_nan()))
    });
    let mut acc = T::zero();
    for &v in values.iter() {
        acc += v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_free_sum_ignores_permutation() {
        let mut a = [0.1f64, 1e10, -1e10, 0.3, 1e-7];
        let mut b = [1e-7f64, -1e10, 0.3, 0.1, 1e10];
        assert_eq!(
            order_free_sum(&mut a).to_bits(),
            order_free_sum(&mut b).to_bits()
        );
    }
}
