//! Floating-point abstraction shared by the reward, network and advantage
//! code. Everything numeric that does not touch the integer slot grid is
//! written against [`Scalar`] so the learner can run in `f32` for speed or
//! `f64` for gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal; every value we feed through here is
    /// representable (possibly rounded) in both `f32` and `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn half<S: Scalar>() -> S {
        S::lit(1.0) / S::from_count(2)
    }

    #[test]
    fn literals_round_trip() {
        assert_eq!(half::<f64>(), 0.5);
        assert_eq!(half::<f32>(), 0.5f32);
        assert_eq!(S64::lit(0.1).as_f64(), 0.1);
    }

    type S64 = f64;
}
