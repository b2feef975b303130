//! Standard normal density, distribution and quantile functions.

use statrs::distribution::{ContinuousCDF, Normal};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `Φ(x)` through the complementary error function, accurate in both tails.
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    // Unit normal; construction cannot fail.
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = standard.inverse_cdf(p);
    // One Newton polish against the erfc-based cdf keeps cdf(quantile(p)) == p
    // to the last few ulps.
    let d = pdf(x);
    if d > 0.0 && x.is_finite() {
        x -= (cdf(x) - p) / d;
    }
    x
}
