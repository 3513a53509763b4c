//! Element type abstraction.
//!
//! Training and inference run in `f32`; the `f64` instantiation exists for
//! gradient checking, where central differences need the extra precision.

use num_traits::Float;

/// Float element type for tensors and the autodiff tape.
pub trait Scalar:
    Float + std::ops::AddAssign + std::ops::MulAssign + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
