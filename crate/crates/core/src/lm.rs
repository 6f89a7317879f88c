//! Levenberg-Marquardt for nonlinear least squares.
//!
//! The damped step solves `min |J d + r|^2 + lambda |D d|^2` with `D` the
//! column norms of `J` (Marquardt scaling). `J` is factored once per
//! iteration; trial dampings only re-solve the small triangular system.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::lstsq;

/// Residual model. Returning `None` marks a parameter vector as infeasible
/// (for instance an unstable simulation); such steps are rejected.
pub trait LeastSquaresProblem {
    fn residuals(&self, params: &DVector<f64>) -> Option<DVector<f64>>;

    /// Jacobian of the residuals with respect to the parameters.
    fn jacobian(&self, params: &DVector<f64>) -> Option<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which an accepted step counts as converged.
    pub rel_tol: f64,
    pub max_lambda: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iters: 200,
            rel_tol: 1e-9,
            max_lambda: 1e12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Condition number of the Jacobian at the returned parameters.
    pub condition: f64,
}

pub fn levenberg_marquardt(
    problem: &impl LeastSquaresProblem,
    initial: DVector<f64>,
    settings: &LmSettings,
) -> Result<LmOutcome> {
    let mut params = initial;
    let mut r = problem
        .residuals(&params)
        .ok_or_else(|| invalid("initial parameters are infeasible"))?;
    let mut cost = r.norm_squared();
    let mut history = vec![cost];
    let mut lambda = settings.lambda0;
    let mut converged = cost == 0.0;
    let mut iterations = 0;
    let mut condition = f64::NAN;

    while !converged && iterations < settings.max_iters {
        iterations += 1;
        let Some(jac) = problem.jacobian(&params) else {
            break;
        };
        let p = jac.ncols();
        let (r_tri, qtr) = triangularize(&jac, &r);
        condition = condition_of(&r_tri);
        let scale = DVector::from_iterator(
            p,
            (0..p).map(|j| {
                let n = jac.column(j).norm();
                if n > 0.0 { n } else { 1.0 }
            }),
        );

        let mut accepted = false;
        while lambda <= settings.max_lambda {
            let step = damped_step(&r_tri, &qtr, &scale, lambda)?;
            let candidate = &params + &step;
            let trial = problem.residuals(&candidate).filter(|t| t.iter().all(|v| v.is_finite()));
            match trial {
                Some(r_new) if r_new.norm_squared() < cost => {
                    let new_cost = r_new.norm_squared();
                    let rel = (cost - new_cost) / cost;
                    params = candidate;
                    r = r_new;
                    cost = new_cost;
                    history.push(cost);
                    lambda = (lambda / settings.lambda_down).max(1e-15);
                    accepted = true;
                    if rel < settings.rel_tol || cost == 0.0 {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= settings.lambda_up,
            }
        }
        if !accepted {
            // No damping produces a decrease: the current point is
            // stationary to working precision.
            converged = true;
        }
    }
    if condition.is_nan() {
        if let Some(jac) = problem.jacobian(&params) {
            condition = condition_of(&triangularize(&jac, &r).0);
        }
    }
    Ok(LmOutcome {
        params,
        cost,
        iterations,
        converged,
        cost_history: history,
        condition,
    })
}

/// Returns `R` and the leading part of `Q^T r` for `J = Q R`.
fn triangularize(jac: &DMatrix<f64>, r: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = jac.ncols();
    let qr = jac.clone().qr();
    let mut qtr = r.clone();
    qr.q_tr_mul(&mut qtr);
    (qr.r(), qtr.rows(0, p).into_owned())
}

fn damped_step(r_tri: &DMatrix<f64>, qtr: &DVector<f64>, scale: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let p = r_tri.ncols();
    let mut a = DMatrix::zeros(2 * p, p);
    a.view_mut((0, 0), (p, p)).copy_from(r_tri);
    let sq = lambda.sqrt();
    for j in 0..p {
        a[(p + j, j)] = sq * scale[j];
    }
    let mut b = DVector::zeros(2 * p);
    b.rows_mut(0, p).copy_from(&(-qtr));
    Ok(lstsq(&a, &b)?.x)
}

fn condition_of(r_tri: &DMatrix<f64>) -> f64 {
    let sv = r_tri.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Central finite-difference Jacobian, used to check analytic ones.
pub fn numeric_jacobian(problem: &impl LeastSquaresProblem, params: &DVector<f64>, rel_step: f64) -> Option<DMatrix<f64>> {
    let r0 = problem.residuals(params)?;
    let mut jac = DMatrix::zeros(r0.len(), params.len());
    for j in 0..params.len() {
        let h = rel_step * params[j].abs().max(1.0);
        let mut plus = params.clone();
        plus[j] += h;
        let mut minus = params.clone();
        minus[j] -= h;
        let rp = problem.residuals(&plus)?;
        let rm = problem.residuals(&minus)?;
        jac.set_column(j, &((rp - rm) / (2.0 * h)));
    }
    Some(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = a exp(b t)
    struct ExpFit {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquaresProblem for ExpFit {
        fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::from_iterator(
                self.t.len(),
                self.t.iter().zip(&self.y).map(|(t, y)| p[0] * (p[1] * t).exp() - y),
            ))
        }

        fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
            let mut j = DMatrix::zeros(self.t.len(), 2);
            for (i, t) in self.t.iter().enumerate() {
                j[(i, 0)] = (p[1] * t).exp();
                j[(i, 1)] = p[0] * t * (p[1] * t).exp();
            }
            Some(j)
        }
    }

    #[test]
    fn fits_exponential_and_cost_is_monotone() {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.05).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let prob = ExpFit { t, y };
        let out = levenberg_marquardt(&prob, DVector::from_vec(vec![1.0, 0.0]), &LmSettings::default()).unwrap();
        assert!(out.converged);
        assert!((out.params[0] - 2.5).abs() < 1e-8);
        assert!((out.params[1] + 1.3).abs() < 1e-8);
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn analytic_and_numeric_jacobians_agree() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let prob = ExpFit { y: vec![0.0; 10], t };
        let p = DVector::from_vec(vec![1.7, -0.4]);
        let a = prob.jacobian(&p).unwrap();
        let n = numeric_jacobian(&prob, &p, 1e-6).unwrap();
        assert!((a - n).norm() < 1e-7);
    }
}
