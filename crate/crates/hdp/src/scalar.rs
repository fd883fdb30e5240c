//! Minimal float abstraction so the network can be instantiated at f32 for
//! training and at f64 for finite-difference gradient verification.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn maxs(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn maxs(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::ZERO {
        S::ONE / (S::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_definition() {
        for &z in &[-20.0f64, -3.0, -0.5, 0.0, 0.5, 3.0, 20.0] {
            let direct = 1.0 / (1.0 + (-z).exp());
            assert!((sigmoid(z) - direct).abs() < 1e-15);
        }
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert!(sigmoid(-200.0f32) >= 0.0);
        assert!(sigmoid(200.0f32) <= 1.0);
        assert!(sigmoid(-200.0f64) >= 0.0);
    }
}
