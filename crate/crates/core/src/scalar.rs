//! Floating-point scalar abstraction shared by images, responses and scores.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for pixel intensities, probabilities and scores.
///
/// Implemented for `f32` and `f64`. Geometry stays in integer pixel space, so
/// only the quantities that are genuinely continuous are generic.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal, panicking only for values no float can hold.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Total order used for ranking; NaN sorts as the smallest value.
    #[inline]
    fn total_cmp_scalar(&self, other: &Self) -> std::cmp::Ordering {
        self.to_f64_lossy().total_cmp(&other.to_f64_lossy())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
