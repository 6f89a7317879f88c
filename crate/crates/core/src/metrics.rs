//! Mean-removed output error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Output error of a model against measured data, both series mean-removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// RMS of the difference (signal units).
    pub rms: f64,
    /// `rms` divided by the RMS of the mean-removed measurement.
    pub relative: f64,
}

impl ErrorMetrics {
    pub fn relative_db(&self) -> f64 {
        20.0 * self.relative.log10()
    }
}

pub fn error_metrics(y_val: &[f64], y_mod: &[f64]) -> Result<ErrorMetrics> {
    if y_val.len() != y_mod.len() {
        return Err(invalid(format!(
            "length mismatch: {} measured vs {} modelled samples",
            y_val.len(),
            y_mod.len()
        )));
    }
    if y_val.is_empty() {
        return Err(invalid("metrics need at least one sample"));
    }
    let n = y_val.len() as f64;
    let mu_val = y_val.iter().sum::<f64>() / n;
    let mu_mod = y_mod.iter().sum::<f64>() / n;
    let err_sq: f64 = y_val
        .iter()
        .zip(y_mod)
        .map(|(v, m)| {
            let e = (v - mu_val) - (m - mu_mod);
            e * e
        })
        .sum();
    let ref_sq: f64 = y_val.iter().map(|v| (v - mu_val) * (v - mu_val)).sum();
    if ref_sq == 0.0 {
        return Err(Error::UndefinedRelative);
    }
    let rms = (err_sq / n).sqrt();
    Ok(ErrorMetrics {
        rms,
        relative: (err_sq / ref_sq).sqrt(),
    })
}
