//! Scalar abstraction for the numeric parts of the engine.
//!
//! Everything that does arithmetic on probabilities, rewards or weights is
//! generic over [`Scalar`], implemented for `f32` and `f64`. Currency is kept
//! exact (see [`crate::dialogue::Money`]) and only converted into a scalar
//! when a ratio is reported.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`, used for literals and config values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every float scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip_small_values() {
        assert_eq!(<f64 as Scalar>::of(0.25).as_f64(), 0.25);
        assert_eq!(<f32 as Scalar>::of(-0.1).as_f64(), (-0.1f32) as f64);
    }
}
