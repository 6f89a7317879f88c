//! Small dense linear-algebra helpers shared by the identification modules.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: DVector<f64>,
    pub rank: usize,
    /// Ratio of extreme singular values of the regressor.
    pub condition: f64,
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
///
/// Householder QR first, then an SVD of the square triangular factor, so
/// that the tall regressor is never squared. Singular values below
/// `max(m, n) * eps * sigma_max` are treated as zero.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LstsqSolution> {
    let (m, n) = a.shape();
    if m != b.len() {
        return Err(invalid(format!("regressor has {m} rows but target has {}", b.len())));
    }
    if m < n || n == 0 {
        return Err(invalid(format!("least squares needs rows >= cols > 0, got {m}x{n}")));
    }
    let qr = a.clone().qr();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let r = qr.r();
    let rhs = qtb.rows(0, n).into_owned();
    let svd = r.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let tol = smax * (m.max(n) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = if smax == 0.0 {
        DVector::zeros(n)
    } else {
        svd.solve(&rhs, tol).map_err(|e| invalid(e.to_string()))?
    };
    Ok(LstsqSolution {
        x,
        rank,
        condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
    })
}

/// Tests whether `1 + f[0] z^-1 + ... + f[n-1] z^-n` has every root strictly
/// inside the unit circle (Schur-Cohn step-down recursion).
pub fn monic_is_stable(f: &[f64]) -> bool {
    let mut a: Vec<f64> = std::iter::once(1.0).chain(f.iter().copied()).collect();
    while a.len() > 1 && a[a.len() - 1] == 0.0 {
        a.pop();
    }
    while a.len() > 1 {
        let n = a.len() - 1;
        let k = a[n] / a[0];
        if !k.is_finite() || k.abs() >= 1.0 {
            return false;
        }
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..n).map(|i| (a[i] - k * a[n - i]) / denom).collect();
        a = next;
    }
    true
}

/// Roots of `c[0] + c[1] s + ... + c[n] s^n` (ascending powers).
pub fn poly_roots(c: &[f64]) -> Result<Vec<Complex<f64>>> {
    let mut c = c.to_vec();
    while c.len() > 1 && c[c.len() - 1] == 0.0 {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    // Substitute s = scale z so the coefficients have comparable size;
    // otherwise wide-band filters lose their small roots.
    let scale = if c[0] != 0.0 { (c[0] / c[n]).abs().powf(1.0 / n as f64) } else { 1.0 };
    let scaled: Vec<f64> = c.iter().enumerate().map(|(k, v)| v * scale.powi(k as i32)).collect();
    let lead = scaled[n];
    let mut companion = DMatrix::zeros(n, n);
    for i in 0..n {
        companion[(0, i)] = -scaled[n - 1 - i] / lead;
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    Ok(companion.complex_eigenvalues().iter().map(|z| z * scale).collect())
}

/// Product of two polynomials given by coefficient lists.
pub fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}
