//! Scalar activations used for gating and positivity constraints.
//!
//! All functions are written to stay finite for arguments up to |x| = 1e3.

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without underflow for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(softplus(x))`, accurate where `softplus(x)` itself would underflow.
pub fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        // softplus(x) = e^x (1 - e^x / 2 + ...)
        x + (-0.5 * x.exp()).ln_1p()
    } else {
        softplus(x).ln()
    }
}

/// Inverse of [`softplus`]: `log(exp(y) - 1)` for `y > 0`.
pub fn inverse_softplus(y: f64) -> Result<f64> {
    if !y.is_finite() || y <= 0.0 {
        return Err(Error::invalid(format!(
            "inverse_softplus requires a finite positive input, got {y}"
        )));
    }
    // log(e^y - 1) = y + log(1 - e^-y)
    Ok(y + (-(-y).exp_m1()).ln())
}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian log-density with the log of the standard deviation supplied directly.
pub(crate) fn gaussian_log_density(y: f64, mean: f64, std: f64, log_std: f64) -> f64 {
    let z = (y - mean) / std;
    -LN_SQRT_2PI - log_std - 0.5 * z * z
}
