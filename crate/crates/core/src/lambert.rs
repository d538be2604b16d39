//! Principal branch of the Lambert W function on the real line.

use std::f64::consts::E;

use crate::error::{Error, Result};

const INV_E: f64 = 1.0 / E;
const MAX_ITERATIONS: usize = 50;

/// Returns `w >= -1` with `w * exp(w) = s`.
///
/// Halley iteration started from `ln(1 + s)` for `s >= 0`, from the branch
/// point series for `s` close to `-1/e`, and from `s` itself in between.
pub fn lambert_w0(s: f64) -> Result<f64> {
    if s.is_nan() || s < -INV_E {
        return Err(Error::LambertDomain(s));
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    if s.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let branch_gap = s + INV_E;
    if branch_gap <= f64::EPSILON * INV_E {
        return Ok(-1.0);
    }

    let mut w = initial_guess(s, branch_gap);
    for _ in 0..MAX_ITERATIONS {
        let ew = w.exp();
        let f = w * ew - s;
        if f == 0.0 {
            break;
        }
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let next = (w - f / denom).max(-1.0);
        let delta = (next - w).abs();
        w = next;
        if delta <= 4.0 * f64::EPSILON * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w)
}

fn initial_guess(s: f64, branch_gap: f64) -> f64 {
    if s >= 0.0 {
        s.ln_1p()
    } else if s < -0.3 {
        let p = (2.0 * E * branch_gap).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        s
    }
}

/// Derivative of `W0` at `s`, given `w = W0(s)`.
pub(crate) fn lambert_w0_derivative(w: f64) -> f64 {
    1.0 / (w.exp() * (1.0 + w))
}
