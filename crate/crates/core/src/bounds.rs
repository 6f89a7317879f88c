//! Closed-form error envelopes for forced-delay models of band-limited
//! systems, and log-log slope extraction for measured error curves.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Power left unexplained by the past of a signal band-limited by an `n`th
/// order all-pole low-pass at `fc`, sampled at `fs`.
pub fn unexplained_power(fc: f64, fs: f64, n: u32) -> Result<f64> {
    if n == 0 {
        return Err(invalid("filter order must be at least 1"));
    }
    if !(fc > 0.0 && fc.is_finite()) {
        return Err(invalid(format!("cutoff must be positive, got {fc}")));
    }
    if !(fs > 2.0 * fc) || !fs.is_finite() {
        return Err(invalid(format!("fs = {fs} Hz must exceed 2 fc = {} Hz", 2.0 * fc)));
    }
    let k = (2 * n - 1) as f64;
    Ok(2.0 * fc / k * (fc / fs).powf(k))
}

/// Output error power of a forced-delay model whose plant has direct term
/// `g0` (in 1/s), given the input prediction error power `pu_eps`.
pub fn output_error_power(g0: f64, fs: f64, pu_eps: f64) -> Result<f64> {
    if !(fs > 0.0) {
        return Err(invalid(format!("fs must be positive, got {fs}")));
    }
    Ok((g0 / fs).powi(2) * pu_eps)
}

/// Slope of the RMS output error against fs, in dB per decade.
pub fn rmse_bound_exponent(n: u32) -> Result<f64> {
    if n == 0 {
        return Err(invalid("filter order must be at least 1"));
    }
    Ok(-20.0 * (n as f64 + 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope_db_per_decade: f64,
    /// Value in dB extrapolated to fs = 1 Hz.
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(log10 fs, 20 log10 value)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 4 {
        return Err(invalid(format!("slope fit needs at least 4 points, got {}", points.len())));
    }
    if let Some(&(f, v)) = points.iter().find(|(f, v)| !(*f > 0.0 && *v > 0.0)) {
        return Err(invalid(format!("non-positive point ({f}, {v}) in log-log fit")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|p| 20.0 * p.1.log10()).collect();
    let span = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if span < 1.0 - 1e-9 {
        return Err(invalid(format!("fs points span {span:.3} decades, need at least 1")));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(SlopeFit {
        slope_db_per_decade: slope,
        intercept,
        r_squared,
    })
}

/// One line of the bound table: `fs_hz,pu_eps_v2,py_eps_v2,rmse_bound_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub fs: f64,
    pub pu_eps: f64,
    pub py_eps: f64,
    pub rmse_bound: f64,
}

impl BoundRow {
    pub const CSV_HEADER: &'static str = "fs_hz,pu_eps_v2,py_eps_v2,rmse_bound_v";

    pub fn csv(&self) -> String {
        format!("{},{:e},{:e},{:e}", self.fs, self.pu_eps, self.py_eps, self.rmse_bound)
    }
}

pub fn bound_table(fc: f64, n: u32, g0: f64, fs_grid: &[f64]) -> Result<Vec<BoundRow>> {
    fs_grid
        .iter()
        .map(|&fs| {
            let pu_eps = unexplained_power(fc, fs, n)?;
            let py_eps = output_error_power(g0, fs, pu_eps)?;
            Ok(BoundRow {
                fs,
                pu_eps,
                py_eps,
                rmse_bound: py_eps.sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unexplained_power_reference_value() {
        let p = unexplained_power(100.0, 78125.0, 4).unwrap();
        let oracle = 200.0 / 7.0 * (100.0f64 / 78125.0).powi(7);
        assert!((p - oracle).abs() < 1e-12 * oracle);
        assert!((p / 1.608e-19 - 1.0).abs() < 1e-3, "{p}");
    }

    #[test]
    fn decade_scaling_and_first_order() {
        let a = unexplained_power(50.0, 1e3, 3).unwrap();
        let b = unexplained_power(50.0, 1e4, 3).unwrap();
        assert!((a / b / 1e5 - 1.0).abs() < 1e-12);
        let p = unexplained_power(10.0, 1e3, 1).unwrap();
        assert!((p - 20.0 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_undersampling() {
        assert!(unexplained_power(100.0, 200.0, 4).is_err());
        assert!(unexplained_power(100.0, 150.0, 4).is_err());
        assert!(unexplained_power(100.0, 1e3, 0).is_err());
    }

    #[test]
    fn output_error_power_values() {
        assert_eq!(output_error_power(0.0, 1e3, 1.0).unwrap(), 0.0);
        let a = output_error_power(3.0, 100.0, 2.0).unwrap();
        let b = output_error_power(3.0, 200.0, 2.0).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        // RC plant with a 1 kHz pole at fs = 78.125 kHz.
        let pu = unexplained_power(100.0, 78125.0, 4).unwrap();
        let p = output_error_power(6283.2, 78125.0, pu).unwrap();
        let oracle = (6283.2f64 / 78125.0).powi(2) * pu;
        assert!((p - oracle).abs() < 1e-12 * oracle);
        assert!((p / 1.040e-21 - 1.0).abs() < 1e-2, "{p}");
        assert!(output_error_power(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn bound_exponent_values() {
        assert_eq!(rmse_bound_exponent(4).unwrap(), -90.0);
        assert_eq!(rmse_bound_exponent(1).unwrap(), -30.0);
    }

    #[test]
    fn slope_of_exact_lines() {
        let pts: Vec<(f64, f64)> = [10.0f64, 30.0, 100.0, 300.0, 1000.0].iter().map(|&f| (f, f.powi(-2))).collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        assert!((fit.slope_db_per_decade + 40.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, 0.3)).collect();
        assert!(fit_loglog_slope(&flat).unwrap().slope_db_per_decade.abs() < 1e-12);
    }

    #[test]
    fn composed_bound_slope_matches_exponent() {
        let grid: Vec<f64> = (0..8).map(|i| 1e3 * 10f64.powf(i as f64 / 4.0)).collect();
        for n in 1..=5 {
            let rows = bound_table(100.0, n, 6283.2, &grid).unwrap();
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.fs, r.rmse_bound)).collect();
            let fit = fit_loglog_slope(&pts).unwrap();
            // sqrt of fs^-(2n-1) times fs^-2.
            let expected = -20.0 * (n as f64 + 0.5);
            assert!((fit.slope_db_per_decade - expected).abs() < 1e-9);
            assert!((fit.slope_db_per_decade - rmse_bound_exponent(n).unwrap()).abs() < 0.5);
        }
    }

    #[test]
    fn slope_fit_rejects_bad_input() {
        assert!(fit_loglog_slope(&[(1.0, 1.0), (10.0, 1.0), (100.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 1.0), (3.0, 0.0), (10.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (5.0, 1.0)]).is_err());
    }
}
