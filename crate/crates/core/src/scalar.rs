//! Scalar abstraction shared by every solver.
//!
//! All recursions, pseudoinverses and oracles are written against [`Real`],
//! which is satisfied by `f32` and `f64`. Concrete aliases for `f64` live at
//! the crate root.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + LowerExp + Debug + Send + Sync
{
    /// Converts an `f64` literal or tolerance into this scalar type.
    fn lit(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("f64 literal representable")
    }

    /// Lossy conversion to `f64`, used for reporting and error payloads.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the scalar type.
    fn machine_epsilon() -> Self {
        <Self as approx::AbsDiffEq>::default_epsilon()
    }
}

impl<T> Real for T where
    T: RealField + Copy + FromPrimitive + ToPrimitive + Display + LowerExp + Debug + Send + Sync
{
}
