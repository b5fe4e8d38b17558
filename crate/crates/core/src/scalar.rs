use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating point scalar the numeric kernels are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal; every supported scalar can represent it approximately.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Machine epsilon of the type.
    fn eps() -> Self {
        <Self as Float>::epsilon()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
