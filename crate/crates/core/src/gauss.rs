//! Gaussian density and distribution helpers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF, `0.5 * erfc(-x / sqrt(2))`. Accurate in both tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    std_normal_pdf((x - mean) / std) / std
}

pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    std_normal_cdf((x - mean) / std)
}

/// Mass of `N(mean, std^2)` on `[lo, hi]`, computed on the side of the mean
/// that avoids cancellation.
pub fn normal_interval_mass(lo: f64, hi: f64, mean: f64, std: f64) -> f64 {
    let (a, b) = ((lo - mean) / std, (hi - mean) / std);
    if a + b > 0.0 {
        // both edges mostly in the upper tail: use survival functions
        std_normal_cdf(-a) - std_normal_cdf(-b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        // Phi(1.959963984540054) = 0.975
        assert!((std_normal_cdf(1.959963984540054) - 0.975).abs() < 1e-15);
        // Phi(-8) = 6.220960574271785e-16
        let tail = std_normal_cdf(-8.0);
        assert!((tail / 6.220960574271785e-16 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interval_mass_is_symmetric() {
        let m1 = normal_interval_mass(2.5, 3.5, 0.0, 1.0);
        let m2 = normal_interval_mass(-3.5, -2.5, 0.0, 1.0);
        assert!((m1 - m2).abs() < 1e-17);
    }
}
