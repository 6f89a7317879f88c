//! One-step-ahead prediction and output-error identification.
//!
//! The output-error model is `y(t) = B(q)/F(q) u(t - nk) + e(t)`. With
//! `nk = 1` the leading numerator coefficient is absent, so the model output
//! at time `t` only depends on inputs up to `t - 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{lstsq, monic_is_stable};
use crate::lm::{levenberg_marquardt, LeastSquaresProblem, LmSettings};
use crate::metrics::error_metrics;
use crate::signals::SampledSignal;

/// Finite-order linear predictor `u(t) ≈ sum_k a_k u(t - k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArPredictor {
    pub order: usize,
    pub coeffs: Vec<f64>,
    /// RMS one-step residual on the fitting record.
    pub fit_rmse: f64,
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Least-squares predictor of the given order, fitted on every sample
/// after the first `order`.
pub fn fit_ar_predictor(u: &SampledSignal, order: usize) -> Result<ArPredictor> {
    if order == 0 {
        return Err(invalid("predictor order must be at least 1"));
    }
    let x = u.samples();
    let n = x.len();
    if n < 10 * order {
        return Err(invalid(format!(
            "{n} samples are fewer than 10 x order {order}"
        )));
    }
    if is_constant(x) {
        return Err(Error::DegenerateInput(
            "constant input gives a rank-deficient regressor".into(),
        ));
    }
    let rows = n - order;
    let a = DMatrix::from_fn(rows, order, |r, k| x[r + order - k - 1]);
    let b = DVector::from_iterator(rows, x[order..].iter().copied());
    let sol = lstsq(&a, &b)?;
    let mut model = ArPredictor {
        order,
        coeffs: sol.x.iter().copied().collect(),
        fit_rmse: 0.0,
    };
    model.fit_rmse = predict_one_step(&model, u)?.1;
    Ok(model)
}

/// Predicts every sample from strictly earlier ones. The first `order`
/// predictions use the shorter history available; the returned RMSE only
/// covers `t >= order`.
pub fn predict_one_step(model: &ArPredictor, u: &SampledSignal) -> Result<(SampledSignal, f64)> {
    if model.coeffs.len() != model.order || model.order == 0 {
        return Err(invalid("predictor coefficients do not match its order"));
    }
    let x = u.samples();
    if x.len() <= model.order {
        return Err(invalid("record not longer than predictor order"));
    }
    let pred: Vec<f64> = (0..x.len())
        .map(|t| {
            model
                .coeffs
                .iter()
                .enumerate()
                .take(t)
                .map(|(k, a)| a * x[t - k - 1])
                .sum()
        })
        .collect();
    let sq: f64 = x[model.order..]
        .iter()
        .zip(&pred[model.order..])
        .map(|(v, p)| (v - p) * (v - p))
        .sum();
    let rmse = (sq / (x.len() - model.order) as f64).sqrt();
    Ok((u.with_samples(pred)?, rmse))
}

/// `y(t) = B(q)/F(q) u(t - nk)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "oe")]
pub struct OeModel {
    pub nb: usize,
    pub nf: usize,
    pub nk: usize,
    /// `b[i]` multiplies `u(t - nk - i)`.
    pub b: Vec<f64>,
    /// Monic denominator `[1, f_1, ..., f_nf]`.
    pub f: Vec<f64>,
}

impl OeModel {
    pub fn new(b: Vec<f64>, f: Vec<f64>, nk: usize) -> Result<Self> {
        if f.first() != Some(&1.0) {
            return Err(invalid("denominator must be monic"));
        }
        if b.is_empty() {
            return Err(invalid("numerator needs at least one coefficient"));
        }
        Ok(Self {
            nb: b.len(),
            nf: f.len() - 1,
            nk,
            b,
            f,
        })
    }

    pub fn is_stable(&self) -> bool {
        monic_is_stable(&self.f[1..])
    }

    fn validate(&self) -> Result<()> {
        if self.b.len() != self.nb || self.f.len() != self.nf + 1 || self.f[0] != 1.0 {
            return Err(invalid("model orders do not match coefficient lengths"));
        }
        if !self.is_stable() {
            return Err(Error::Unstable("F(q) has roots on or outside the unit circle".into()));
        }
        Ok(())
    }

    fn params(&self) -> DVector<f64> {
        DVector::from_iterator(self.nb + self.nf, self.b.iter().chain(&self.f[1..]).copied())
    }

    fn with_params(&self, p: &DVector<f64>) -> Self {
        let mut f = vec![1.0];
        f.extend(p.iter().skip(self.nb));
        Self {
            b: p.iter().take(self.nb).copied().collect(),
            f,
            ..self.clone()
        }
    }
}

fn oe_response(b: &[f64], f: &[f64], nk: usize, u: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    for t in 0..u.len() {
        let mut acc = 0.0;
        for (i, bi) in b.iter().enumerate() {
            if t >= nk + i {
                acc += bi * u[t - nk - i];
            }
        }
        for (j, fj) in f.iter().enumerate().skip(1) {
            if t >= j {
                acc -= fj * y[t - j];
            }
        }
        y[t] = acc;
    }
    y
}

/// Free-run simulation from zero initial conditions.
pub fn simulate_oe(model: &OeModel, u: &SampledSignal) -> Result<SampledSignal> {
    model.validate()?;
    u.with_samples(oe_response(&model.b, &model.f, model.nk, u.samples()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rmse: f64,
    pub relative_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub condition_estimate: f64,
}

impl FitReport {
    pub fn relative_rmse_db(&self) -> f64 {
        20.0 * self.relative_rmse.log10()
    }

    pub const CSV_HEADER: &'static str = "fs_hz,nk,rmse_v,relative_rmse_db,iterations,converged";

    pub fn csv_row(&self, fs_hz: f64, nk: usize) -> String {
        format!(
            "{},{},{},{},{},{}",
            fs_hz,
            nk,
            self.rmse,
            self.relative_rmse_db(),
            self.iterations,
            self.converged
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct OeFitOptions {
    pub lm: LmSettings,
    /// Samples excluded from the cost. Defaults to `max(nf, nb + nk, 50)`.
    pub burn_in: Option<usize>,
}


struct OeProblem<'a> {
    u: &'a [f64],
    y: &'a [f64],
    nb: usize,
    nf: usize,
    nk: usize,
    burn: usize,
}

impl OeProblem<'_> {
    fn split<'p>(&self, p: &'p DVector<f64>) -> (&'p [f64], Vec<f64>) {
        let s = p.as_slice();
        let mut f = vec![1.0];
        f.extend_from_slice(&s[self.nb..]);
        (&s[..self.nb], f)
    }

    fn simulate(&self, p: &DVector<f64>) -> Option<Vec<f64>> {
        let (b, f) = self.split(p);
        if !monic_is_stable(&f[1..]) {
            return None;
        }
        Some(oe_response(b, &f, self.nk, self.u))
    }
}

impl LeastSquaresProblem for OeProblem<'_> {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let yhat = self.simulate(p)?;
        let n = self.y.len() - self.burn;
        Some(DVector::from_iterator(
            n,
            (self.burn..self.y.len()).map(|t| self.y[t] - yhat[t]),
        ))
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let yhat = self.simulate(p)?;
        let (_, f) = self.split(p);
        // Sensitivities are past inputs / outputs filtered by 1/F.
        let w = oe_response(&[1.0], &f, 0, self.u);
        let v = oe_response(&[1.0], &f, 0, &yhat);
        let rows = self.y.len() - self.burn;
        let mut jac = DMatrix::zeros(rows, self.nb + self.nf);
        for (r, t) in (self.burn..self.y.len()).enumerate() {
            for i in 0..self.nb {
                let lag = self.nk + i;
                if t >= lag {
                    jac[(r, i)] = -w[t - lag];
                }
            }
            for j in 1..=self.nf {
                if t >= j {
                    jac[(r, self.nb + j - 1)] = v[t - j];
                }
            }
        }
        Some(jac)
    }
}

/// Equation-error (ARX) estimate with the same orders, used as the starting
/// point of the output-error search.
pub fn fit_arx(u: &[f64], y: &[f64], nb: usize, nf: usize, nk: usize, start: usize) -> Result<OeModel> {
    let rows = y.len().saturating_sub(start);
    if rows < nb + nf {
        return Err(invalid("record too short for the requested orders"));
    }
    let a = DMatrix::from_fn(rows, nb + nf, |r, c| {
        let t = r + start;
        if c < nb {
            let lag = nk + c;
            if t >= lag { u[t - lag] } else { 0.0 }
        } else {
            let j = c - nb + 1;
            if t >= j { -y[t - j] } else { 0.0 }
        }
    });
    let rhs = DVector::from_iterator(rows, y[start..].iter().copied());
    let sol = lstsq(&a, &rhs)?;
    let mut f = vec![1.0];
    f.extend(sol.x.iter().skip(nb));
    let mut model = OeModel {
        nb,
        nf,
        nk,
        b: sol.x.iter().take(nb).copied().collect(),
        f,
    };
    stabilize(&mut model);
    Ok(model)
}

/// Pulls the roots of F inside the unit circle by radial contraction.
fn stabilize(model: &mut OeModel) {
    let mut rho: f64 = 1.0;
    let original = model.f.clone();
    while !model.is_stable() && rho > 1e-3 {
        rho *= 0.95;
        for (j, fj) in model.f.iter_mut().enumerate() {
            *fj = original[j] * rho.powi(j as i32);
        }
    }
    if !model.is_stable() {
        model.f = vec![1.0; 1].into_iter().chain(std::iter::repeat_n(0.0, model.nf)).collect();
    }
}

pub fn fit_oe(u: &SampledSignal, y: &SampledSignal, nb: usize, nf: usize, nk: usize) -> Result<(OeModel, FitReport)> {
    fit_oe_with(u, y, nb, nf, nk, &OeFitOptions::default())
}

pub fn fit_oe_with(
    u: &SampledSignal,
    y: &SampledSignal,
    nb: usize,
    nf: usize,
    nk: usize,
    opts: &OeFitOptions,
) -> Result<(OeModel, FitReport)> {
    if u.len() != y.len() {
        return Err(invalid(format!(
            "input has {} samples, output {}",
            u.len(),
            y.len()
        )));
    }
    if (u.fs() - y.fs()).abs() > 1e-9 * u.fs() {
        return Err(invalid("input and output sampling rates differ"));
    }
    if nk > 1 {
        return Err(invalid(format!("delay nk must be 0 or 1, got {nk}")));
    }
    if nb == 0 {
        return Err(invalid("nb must be at least 1"));
    }
    let burn = opts.burn_in.unwrap_or_else(|| nf.max(nb + nk).max(50));
    if u.len() < burn + 2 * (nb + nf) {
        return Err(invalid("record too short after burn-in"));
    }
    let problem = OeProblem {
        u: u.samples(),
        y: y.samples(),
        nb,
        nf,
        nk,
        burn,
    };
    let init = fit_arx(u.samples(), y.samples(), nb, nf, nk, burn)?;
    let outcome = levenberg_marquardt(&problem, init.params(), &opts.lm)?;
    let model = init.with_params(&outcome.params);
    let yhat = oe_response(&model.b, &model.f, nk, u.samples());
    let metrics = error_metrics(&y.samples()[burn..], &yhat[burn..])?;
    let rmse = (outcome.cost / (u.len() - burn) as f64).sqrt();
    Ok((
        model,
        FitReport {
            rmse,
            relative_rmse: metrics.relative,
            iterations: outcome.iterations,
            converged: outcome.converged,
            condition_estimate: outcome.condition,
        },
    ))
}
