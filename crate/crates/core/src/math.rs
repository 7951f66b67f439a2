//! Float helpers backed by `libm`, since `core` has no transcendental functions.

pub(crate) use libm::{atanh, cos, cosh, erfc, exp, fabs as abs, floor, log as ln, pow, sin, sinh, sqrt, tanh};

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}

/// Standard normal CDF.
#[inline]
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / core::f64::consts::SQRT_2)
}
