//! Scalar abstraction for the numerical core.
//!
//! Every solver, estimator, and check in this crate is generic over a
//! floating-point scalar implementing [`Real`]. The trait bundles the
//! `num-traits` surface the numerics need (arithmetic, comparisons, casts)
//! with the two capabilities `num-traits` does not cover:
//!
//! * drawing a standard normal variate (`standard_normal`), so ensemble
//!   simulation stays scalar-generic while using `rand_distr`'s ziggurat;
//! * lossless export to `f64` (`to_f64_lossy`) for serialization — the
//!   on-disk containers are fixed little-endian f64 regardless of the
//!   in-memory scalar.
//!
//! Production runs use `f64` (all stated tolerances assume it); `f32`
//! instantiation is kept compiling and smoke-tested so the core stays
//! honestly generic.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable by every module in this crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar.
    ///
    /// Panics only if the conversion is unrepresentable, which cannot
    /// happen for the finite literals used throughout the crate.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal must convert to Real")
    }

    /// Widens to `f64` (exact for f64, rounded for f32).
    fn to_f64_lossy(self) -> f64;

    /// Draws a standard normal variate from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
