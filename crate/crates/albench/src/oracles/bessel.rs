//! Bessel function of the first kind, integer order, by ascending power
//! series. Stable in 64-bit precision for the benchmark range x in [0, 12].

use crate::error::{Error, Result};

pub const MAX_ORDER: i64 = 9;
pub const MAX_X: f64 = 10.0;
const MIN_TERMS: usize = 30;
const MAX_TERMS: usize = 80;

/// J_alpha(x) for alpha in {0..9}, x in [0, 10]; accurate to ~1e-12.
pub fn bessel_oracle(alpha: i64, x: f64) -> Result<f64> {
    if !(0..=MAX_ORDER).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "bessel order {alpha} outside 0..={MAX_ORDER}"
        )));
    }
    if !x.is_finite() || !(0.0..=MAX_X).contains(&x) {
        return Err(Error::InvalidInput(format!(
            "bessel argument {x} outside [0, {MAX_X}]"
        )));
    }
    Ok(bessel_j_series(alpha as u32, x))
}

/// Ascending series: J_a(x) = sum_m (-1)^m / (m! (m+a)!) (x/2)^(2m+a).
pub fn bessel_j_series(alpha: u32, x: f64) -> f64 {
    let half = x / 2.0;
    // Leading term (x/2)^alpha / alpha!
    let mut term = 1.0;
    for k in 1..=alpha {
        term *= half / k as f64;
    }
    let mut sum = term;
    for m in 1..MAX_TERMS {
        term *= -(half * half) / (m as f64 * (m as f64 + alpha as f64));
        sum += term;
        if m >= MIN_TERMS && term.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}
