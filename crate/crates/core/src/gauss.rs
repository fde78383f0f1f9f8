//! Standard-normal helpers built on `libm` so results match across platforms.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF.
#[inline]
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn phi_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / (2.0 * PI).sqrt()
}

/// Mass of `N(0, sigma)` on `[d - w/2, d + w/2]`.
///
/// Evaluated in the lower tail (the mass is symmetric in `d`) so far-tail
/// values keep their relative precision instead of cancelling to zero.
#[inline]
pub fn interval_mass(d: f64, sigma: f64, width: f64) -> f64 {
    let d = -d.abs();
    let upper = (d + 0.5 * width) / sigma;
    let lower = (d - 0.5 * width) / sigma;
    if upper <= 0.0 {
        phi_cdf(upper) - phi_cdf(lower)
    } else {
        // interval straddles the mean
        1.0 - phi_cdf(-upper) - phi_cdf(lower)
    }
}
