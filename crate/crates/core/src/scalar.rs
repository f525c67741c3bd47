//! Floating-point abstraction for the numeric layers. Everything that does
//! math is generic over [`Scalar`]; the crate root pins `f64` aliases for the
//! simulator entry points.

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type used by channels, resource accounting, solvers, and metrics.
/// Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// One standard-normal draw. Fading, shadowing, and receiver noise build
    /// on this so the whole stack stays generic without extra trait bounds.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw from `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

impl Scalar for f64 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

/// Casts an `f64` constant into `T`. The implementors above make this total
/// for finite inputs.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant representable in Scalar")
}

/// Casts a `usize` count into `T`.
#[inline]
pub fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("usize count representable in Scalar")
}
