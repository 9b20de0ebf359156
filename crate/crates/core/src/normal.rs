//! Standard-normal CDF and quantile function.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::standard()
}

/// Φ(z).
pub fn std_cdf(z: f64) -> f64 {
    standard().cdf(z)
}

/// Φ⁻¹(p) for p in (0, 1). Returns ±∞ at the closed endpoints.
pub fn std_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // One Newton step tightens the library quantile to near machine precision.
    let n = standard();
    let z = n.inverse_cdf(p);
    let density = n.pdf(z);
    if density > 0.0 {
        z - (n.cdf(z) - p) / density
    } else {
        z
    }
}

/// Gaussian CDF with the given mean and standard deviation.
pub fn cdf(x: f64, mean: f64, std: f64) -> f64 {
    std_cdf((x - mean) / std)
}

/// Percent-point function `μ + σ·Φ⁻¹(p)`.
pub fn ppf(p: f64, mean: f64, std: f64) -> f64 {
    mean + std * std_ppf(p)
}

pub fn pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}
