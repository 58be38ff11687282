use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Real scalar used for tensor values and scale factors: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Round to nearest integer, ties to even.
    fn round_half_even(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to any float scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }
}

impl Scalar for f32 {
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}

impl Scalar for f64 {
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
}
