//! Scalar abstraction for the core math.
//!
//! Everything numeric in this crate is generic over [`Real`], which is any
//! IEEE float with the conversions we need. Concrete aliases for the f64
//! instantiations live at the crate root.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64; exact for f64 itself.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Overflow-safe logistic function sigma(z) = 1 / (1 + exp(-z)).
pub fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}

/// log(sum(exp(v))) with max shift; returns -inf on an empty slice.
pub fn log_sum_exp<R: Real>(values: &[R]) -> R {
    let max = values
        .iter()
        .copied()
        .fold(R::neg_infinity(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum: R = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        for z in [-30.0f64, -3.0, -0.5, 0.0, 0.5, 3.0, 30.0] {
            let p = sigmoid(z);
            assert!((p + sigmoid(-z) - 1.0).abs() < 1e-15);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn sigmoid_extremes_stay_finite() {
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [0.1f64, -2.0, 1.5];
        let direct: f64 = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_large_values() {
        let v = [1000.0f64, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2.0f64.ln())).abs() < 1e-12);
    }
}
