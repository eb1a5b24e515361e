//! Scalar math routed through `num_traits::Float` so that std and no_std
//! builds share the same libm implementations (and therefore the same bits).

use num_traits::Float;

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    Float::exp(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    Float::ln(x)
}

#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    Float::tanh(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    Float::sqrt(x)
}

#[inline]
pub(crate) fn abs(x: f64) -> f64 {
    Float::abs(x)
}

#[inline]
pub(crate) fn powi(x: f64, n: i32) -> f64 {
    Float::powi(x, n)
}
