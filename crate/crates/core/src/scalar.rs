//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the engine computes in: `f32` or `f64`.
///
/// Everything above the tensor kernels is written against this trait, so a
/// whole model can be instantiated at either precision. Gradient checks and
/// the training defaults use `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// Converts an `f64` literal. Panics only if the value is unrepresentable,
    /// which cannot happen for finite literals in `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Standard normal CDF, `Φ(x) = (1 + erf(x/√2)) / 2`.
#[inline]
pub fn normal_cdf<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    half * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * S::lit(0.5)).exp()
}

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    x * normal_cdf(x)
}
