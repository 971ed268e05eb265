//! Log-space non-negativity transform.
//!
//! Sphere samples (signal or FOD amplitudes) are floored at ε and mapped to
//! their logarithm before any basis fit; predictions are mapped back with the
//! exponential, which makes every restored amplitude strictly positive.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Arguments above this overflow `exp` in f64.
pub const EXP_LIMIT: f64 = 709.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonNegConfig {
    pub epsilon: f64,
}

impl Default for NonNegConfig {
    fn default() -> Self {
        Self { epsilon: 0.005 }
    }
}

impl NonNegConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let cfg = Self { epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!(
                "non-negativity epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn floor(&self) -> f64 {
        self.epsilon.ln()
    }
}

/// ln(max(v, ε)) elementwise. NaN inputs are floored as well.
pub fn clamp_log(values: &[f64], cfg: &NonNegConfig) -> Vec<f64> {
    values.iter().map(|&v| clamp_log_one(v, cfg.epsilon)).collect()
}

#[inline]
pub fn clamp_log_one(v: f64, epsilon: f64) -> f64 {
    if v > epsilon {
        v.ln()
    } else {
        epsilon.ln()
    }
}

pub fn clamp_log_in_place(values: &mut [f64], cfg: &NonNegConfig) {
    for v in values {
        *v = clamp_log_one(*v, cfg.epsilon);
    }
}

/// exp elementwise; refuses arguments that would overflow. Results that
/// would underflow are held at the smallest positive normal f64.
pub fn exp_restore(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if v > EXP_LIMIT || v.is_nan() {
                Err(Error::Overflow(v))
            } else {
                Ok(v.exp().max(f64::MIN_POSITIVE))
            }
        })
        .collect()
}
