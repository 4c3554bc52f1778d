use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar used throughout the numerical core (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal or parameter into `Self`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 value not representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize value not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::of(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::of(2.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function `1 / (1 + e^{-x})`, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Natural log of the logistic function, `-ln(1 + e^{-x})`.
#[inline]
pub fn ln_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Derivative of the logistic function, `σ(x)·σ(-x)`.
#[inline]
pub fn sigmoid_prime<T: Scalar>(x: T) -> T {
    sigmoid(x) * sigmoid(-x)
}

/// Natural log of `σ'(x)`; finite for every finite `x`, even where `σ'(x)` underflows.
#[inline]
pub fn ln_sigmoid_prime<T: Scalar>(x: T) -> T {
    ln_sigmoid(x) + ln_sigmoid(-x)
}

/// `ln(e^a + e^b)` for log-magnitudes that may be `-inf`.
#[inline]
pub fn ln_add_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln|x|`, `-inf` at zero.
#[inline]
pub fn ln_abs<T: Scalar>(x: T) -> T {
    if x == T::zero() {
        T::neg_infinity()
    } else {
        x.abs().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_half_at_zero_and_saturates() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!((sigmoid(40.0_f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0_f64) >= 0.0);
        assert!(sigmoid(800.0_f64) <= 1.0);
    }

    #[test]
    fn log_derivative_survives_underflow() {
        let x = 900.0_f64;
        assert_eq!(sigmoid_prime(x), 0.0);
        let l = ln_sigmoid_prime(x);
        assert!(l.is_finite());
        assert!((l + 900.0).abs() < 1e-9);
        let y = 1.3_f64;
        assert!((ln_sigmoid_prime(y) - sigmoid_prime(y).ln()).abs() < 1e-12);
    }

    #[test]
    fn ln_add_exp_matches_direct() {
        let (a, b) = (0.3_f64.ln(), 0.6_f64.ln());
        assert!((ln_add_exp(a, b) - 0.9_f64.ln()).abs() < 1e-14);
        assert_eq!(ln_add_exp(f64::NEG_INFINITY, a), a);
    }
}
