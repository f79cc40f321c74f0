//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar usable throughout the model, inference and training code.
///
/// Implemented for `f32` and `f64`. Tolerances that depend on the working
/// precision are exposed as associated functions so generic code can scale its
/// checks instead of hard-coding `f64` constants.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal into the working precision.
    fn lit(x: f64) -> Self;

    /// Converts a count.
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    fn as_f64(self) -> f64;

    /// Slack allowed on intensity row sums and simplex sums.
    fn structural_tol() -> Self {
        Self::lit(4096.0) * Self::epsilon()
    }

    /// Slack allowed on transition-matrix row sums.
    fn stochastic_tol() -> Self {
        Self::lit(4.5e5) * Self::epsilon()
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// `log(Σ exp(x_i))`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let s: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(n!)`; exact table for small `n`, Stirling series beyond.
pub fn ln_factorial<T: Real>(n: u64) -> T {
    T::lit(ln_factorial_f64(n))
}

fn ln_factorial_f64(n: u64) -> f64 {
    const TABLE_LEN: usize = 256;
    static TABLE: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(TABLE_LEN);
        let mut acc = 0.0f64;
        t.push(0.0);
        for i in 1..TABLE_LEN {
            acc += (i as f64).ln();
            t.push(acc);
        }
        t
    });
    if (n as usize) < TABLE_LEN {
        return table[n as usize];
    }
    let x = n as f64 + 1.0;
    // ln Γ(x) via Stirling with three correction terms; |error| < 1e-15 for x > 256.
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x.powi(3))
        + 1.0 / (1260.0 * x.powi(5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_neg_infinity() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        let v = log_sum_exp(&[0.0f64, f64::NEG_INFINITY]);
        assert!(v.abs() < 1e-15);
        let v = log_sum_exp(&[1000.0f64, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn log_add_exp_matches_direct() {
        let a = -1.3f64;
        let b = 0.7f64;
        assert!((log_add_exp(a, b) - (a.exp() + b.exp()).ln()).abs() < 1e-15);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, b), b);
    }

    #[test]
    fn ln_factorial_table_and_tail_agree() {
        let direct: f64 = (1..=300u64).map(|i| (i as f64).ln()).sum();
        let approx: f64 = ln_factorial(300);
        assert!((direct - approx).abs() / direct < 1e-13);
        assert_eq!(ln_factorial::<f64>(0), 0.0);
        assert!((ln_factorial::<f64>(5) - 120f64.ln()).abs() < 1e-14);
    }
}
