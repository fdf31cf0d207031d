//! Scalar abstractions shared by the numeric modules.
//!
//! [`Scalar`] covers everything the closed-form formulas need (field
//! arithmetic and conversion from counts), so they can be evaluated in `f32`,
//! `f64` or exactly in `Ratio<i128>`. [`Real`] adds the transcendental
//! operations used by interpolation and the simulator clock.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num};

pub trait Scalar: Num + FromPrimitive + Copy + PartialOrd + Debug + Send + Sync {}

impl<T> Scalar for T where T: Num + FromPrimitive + Copy + PartialOrd + Debug + Send + Sync {}

pub trait Real: Scalar + Float {}

impl<T> Real for T where T: Scalar + Float {}

/// Converts a count into the scalar type.
///
/// Every scalar used here represents all `u64` values it is asked to hold
/// (possibly with rounding for floats), so a failed conversion is a bug.
#[inline]
pub fn from_count<T: Scalar>(n: u64) -> T {
    T::from_u64(n).expect("count not representable in scalar type")
}

#[inline]
pub fn from_f64<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("value not representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn counts_convert_exactly_into_rationals() {
        let r: Ratio<i128> = from_count(1 << 40);
        assert_eq!(r, Ratio::from_integer(1 << 40));
        let x: f32 = from_count(3);
        assert_eq!(x, 3.0);
    }
}
