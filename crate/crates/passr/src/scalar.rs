//! Element types for tensors: f32 for training, f64 for verification runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type used throughout the engine.
///
/// Training runs on `f32`; gradient checks and other verification paths
/// instantiate the same code with `f64` for the extra headroom central
/// finite differences need.
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// Lossy conversion from f64 (the literal type of all constants here).
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Next value from a uniform [0, 1) stream.
    fn sample_unit<R: rand::Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn sample_unit<R: rand::Rng>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn sample_unit<R: rand::Rng>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}
