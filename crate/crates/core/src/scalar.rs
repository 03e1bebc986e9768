//! Element type abstraction.
//!
//! All tensor math (reference interpreter, rewrite passes, functional
//! simulation) is generic over [`Scalar`] so the whole pipeline can run in
//! `f32` or `f64`. The performance model is independent of the element type:
//! modeled datapath width comes from `ArchConfig::bytes_per_element`, not from
//! `S`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type of graphs, tensors and simulations.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
}

/// Lossy-free conversion from the interchange type (`f64`) used by the JSON
/// formats. `f64 -> f32` rounds; that is acceptable for an `f32` pipeline.
pub fn from_f64<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("float-to-float conversion cannot fail")
}

/// Conversion to the interchange type used by the JSON formats.
pub fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().expect("float-to-float conversion cannot fail")
}
