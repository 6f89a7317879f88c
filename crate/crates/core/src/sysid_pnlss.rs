//! Polynomial nonlinear state-space models
//!
//! ```text
//! x(t+1) = A x(t) + B u(t) + E zeta(x(t), u(t))
//! y(t)   = C x(t) + D u(t) + F eta(x(t), u(t))
//! ```
//!
//! where `zeta` and `eta` collect monomials of degree 2 up to `P` in the
//! states and the input. With `D = 0` and no input monomials in `eta` the
//! output only depends on past inputs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lm::{levenberg_marquardt, LeastSquaresProblem, LmSettings};
use crate::metrics::{error_metrics, ErrorMetrics};
use crate::signals::SampledSignal;
use crate::sysid_linear::{fit_oe_with, FitReport, OeFitOptions, OeModel};

/// States beyond this magnitude count as a diverged simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Monomials of total degree `2..=max_degree` in `(x_1, ..., x_n, u)`.
///
/// Ordered by degree, then descending lexicographically on the exponent
/// tuple, so for one state and degree 3 the terms are
/// `x^2, x u, u^2, x^3, x^2 u, x u^2, u^3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasis {
    pub state_dim: usize,
    pub max_degree: u32,
    /// One exponent tuple of length `state_dim + 1` per monomial; the last
    /// entry is the input exponent.
    pub exponents: Vec<Vec<u32>>,
}

fn compositions(vars: usize, degree: u32) -> Vec<Vec<u32>> {
    if vars == 1 {
        return vec![vec![degree]];
    }
    let mut out = Vec::new();
    for first in (0..=degree).rev() {
        for rest in compositions(vars - 1, degree - first) {
            let mut v = Vec::with_capacity(vars);
            v.push(first);
            v.extend(rest);
            out.push(v);
        }
    }
    out
}

impl MonomialBasis {
    pub fn new(state_dim: usize, max_degree: u32) -> Result<Self> {
        if state_dim == 0 {
            return Err(invalid("state dimension must be at least 1"));
        }
        if max_degree < 2 {
            return Err(invalid(format!("maximum degree must be at least 2, got {max_degree}")));
        }
        let exponents = (2..=max_degree)
            .flat_map(|d| compositions(state_dim + 1, d))
            .collect();
        Ok(Self {
            state_dim,
            max_degree,
            exponents,
        })
    }

    pub fn from_exponents(state_dim: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        let mut max_degree = 2;
        for e in &exponents {
            let deg: u32 = e.iter().sum();
            if e.len() != state_dim + 1 || deg < 2 {
                return Err(invalid(format!("bad monomial exponent tuple {e:?}")));
            }
            max_degree = max_degree.max(deg);
        }
        Ok(Self {
            state_dim,
            max_degree,
            exponents,
        })
    }

    /// Same basis with every monomial involving the input removed.
    pub fn without_input(&self) -> Self {
        Self {
            exponents: self
                .exponents
                .iter()
                .filter(|e| e[self.state_dim] == 0)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    fn powers(&self, x: &[f64], u: f64) -> Vec<Vec<f64>> {
        let p = self.max_degree as usize;
        x.iter()
            .chain(std::iter::once(&u))
            .map(|&v| {
                let mut pw = vec![1.0; p + 1];
                for k in 1..=p {
                    pw[k] = pw[k - 1] * v;
                }
                pw
            })
            .collect()
    }

    /// Values and, if `grad` is given, partial derivatives with respect to
    /// `(x, u)` stored row-major as `grad[m * (n + 1) + v]`.
    fn eval_into(&self, x: &[f64], u: f64, vals: &mut [f64], grad: Option<&mut [f64]>) {
        let pw = self.powers(x, u);
        let nv = self.state_dim + 1;
        for (m, e) in self.exponents.iter().enumerate() {
            vals[m] = e.iter().enumerate().map(|(v, &k)| pw[v][k as usize]).product();
        }
        if let Some(grad) = grad {
            for (m, e) in self.exponents.iter().enumerate() {
                for v in 0..nv {
                    grad[m * nv + v] = if e[v] == 0 {
                        0.0
                    } else {
                        let mut g = e[v] as f64 * pw[v][e[v] as usize - 1];
                        for (w, &k) in e.iter().enumerate() {
                            if w != v {
                                g *= pw[w][k as usize];
                            }
                        }
                        g
                    };
                }
            }
        }
    }
}

pub fn eval_monomials(basis: &MonomialBasis, x: &[f64], u: f64) -> Vec<f64> {
    assert_eq!(x.len(), basis.state_dim, "state length does not match basis");
    let mut out = vec![0.0; basis.len()];
    basis.eval_into(x, u, &mut out, None);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnlssModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Output row.
    pub c: DVector<f64>,
    pub d: f64,
    pub e: DMatrix<f64>,
    pub f: DVector<f64>,
    pub basis_state: MonomialBasis,
    pub basis_out: MonomialBasis,
}

impl PnlssModel {
    /// Linear model with zero nonlinear coefficients on the given bases.
    pub fn from_linear(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        d: f64,
        basis_state: MonomialBasis,
        basis_out: MonomialBasis,
    ) -> Result<Self> {
        let na = a.nrows();
        let model = Self {
            e: DMatrix::zeros(na, basis_state.len()),
            f: DVector::zeros(basis_out.len()),
            a,
            b,
            c,
            d,
            basis_state,
            basis_out,
        };
        model.check_dims()?;
        Ok(model)
    }

    pub fn na(&self) -> usize {
        self.a.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    fn check_dims(&self) -> Result<()> {
        let na = self.na();
        let ok = na >= 1
            && self.a.ncols() == na
            && self.b.len() == na
            && self.c.len() == na
            && self.e.nrows() == na
            && self.e.ncols() == self.basis_state.len()
            && self.f.len() == self.basis_out.len()
            && self.basis_state.state_dim == na
            && self.basis_out.state_dim == na;
        if ok {
            Ok(())
        } else {
            Err(invalid("PNLSS matrix dimensions are inconsistent"))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        let rho = self.spectral_radius();
        if !(rho < 1.0) {
            return Err(Error::Unstable(format!("spectral radius of A is {rho:.6}")));
        }
        Ok(())
    }

    /// Output with the nonlinear terms removed.
    pub fn linear_part(&self) -> Self {
        Self {
            e: DMatrix::zeros(self.e.nrows(), self.e.ncols()),
            f: DVector::zeros(self.f.len()),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("PNLSS model", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("PNLSS model", e))
    }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("{what}: rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Serialize, Deserialize)]
struct BasisJson {
    state: Vec<Vec<u32>>,
    out: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename = "pnlss")]
struct PnlssJson {
    na: usize,
    #[serde(rename = "P")]
    p: u32,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    #[serde(rename = "D")]
    d: f64,
    #[serde(rename = "E")]
    e: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    f: Vec<f64>,
    basis: BasisJson,
}

impl Serialize for PnlssModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PnlssJson {
            na: self.na(),
            p: self.basis_state.max_degree.max(self.basis_out.max_degree),
            a: rows_of(&self.a),
            b: self.b.iter().copied().collect(),
            c: self.c.iter().copied().collect(),
            d: self.d,
            e: rows_of(&self.e),
            f: self.f.iter().copied().collect(),
            basis: BasisJson {
                state: self.basis_state.exponents.clone(),
                out: self.basis_out.exponents.clone(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PnlssModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = PnlssJson::deserialize(d)?;
        let build = || -> Result<PnlssModel> {
            let mut basis_state = MonomialBasis::from_exponents(j.na, j.basis.state.clone())?;
            let mut basis_out = MonomialBasis::from_exponents(j.na, j.basis.out.clone())?;
            basis_state.max_degree = j.p;
            basis_out.max_degree = j.p;
            let model = PnlssModel {
                a: matrix_from_rows(&j.a, j.na, "A")?,
                b: DVector::from_vec(j.b.clone()),
                c: DVector::from_vec(j.c.clone()),
                d: j.d,
                e: if j.e.is_empty() && basis_state.is_empty() {
                    DMatrix::zeros(j.na, 0)
                } else {
                    matrix_from_rows(&j.e, basis_state.len(), "E")?
                },
                f: DVector::from_vec(j.f.clone()),
                basis_state,
                basis_out,
            };
            model.check_dims()?;
            Ok(model)
        };
        build().map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Row-major copy of the model used in the simulation loops.
struct Flat<'m> {
    na: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    e: Vec<f64>,
    f: Vec<f64>,
    bs: &'m MonomialBasis,
    bo: &'m MonomialBasis,
}

impl<'m> Flat<'m> {
    fn new(m: &'m PnlssModel) -> Self {
        let na = m.na();
        Self {
            na,
            a: (0..na * na).map(|k| m.a[(k / na, k % na)]).collect(),
            b: m.b.iter().copied().collect(),
            c: m.c.iter().copied().collect(),
            d: m.d,
            e: (0..na * m.e.ncols())
                .map(|k| m.e[(k / m.e.ncols(), k % m.e.ncols())])
                .collect(),
            f: m.f.iter().copied().collect(),
            bs: &m.basis_state,
            bo: &m.basis_out,
        }
    }

    /// Output sequence and the final state, or the step at which the state
    /// left the admissible region.
    fn run(&self, u: &[f64], x0: &[f64]) -> std::result::Result<Vec<f64>, usize> {
        let na = self.na;
        let nz = self.bs.len();
        let mut x = x0.to_vec();
        let mut xn = vec![0.0; na];
        let mut zeta = vec![0.0; nz];
        let mut eta = vec![0.0; self.bo.len()];
        let mut y = Vec::with_capacity(u.len());
        for (t, &ut) in u.iter().enumerate() {
            self.bs.eval_into(&x, ut, &mut zeta, None);
            self.bo.eval_into(&x, ut, &mut eta, None);
            let mut yt = self.d * ut;
            for i in 0..na {
                yt += self.c[i] * x[i];
            }
            for (fm, em) in self.f.iter().zip(&eta) {
                yt += fm * em;
            }
            y.push(yt);
            for i in 0..na {
                let mut acc = self.b[i] * ut;
                for j in 0..na {
                    acc += self.a[i * na + j] * x[j];
                }
                for m in 0..nz {
                    acc += self.e[i * nz + m] * zeta[m];
                }
                xn[i] = acc;
            }
            std::mem::swap(&mut x, &mut xn);
            if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
                return Err(t + 1);
            }
        }
        Ok(y)
    }
}

/// Recursive simulation from initial state `x0`.
pub fn simulate_pnlss(model: &PnlssModel, u: &SampledSignal, x0: &[f64]) -> Result<SampledSignal> {
    model.validate()?;
    if x0.len() != model.na() {
        return Err(invalid(format!("initial state has {} entries, model has {}", x0.len(), model.na())));
    }
    let y = Flat::new(model)
        .run(u.samples(), x0)
        .map_err(|step| Error::Diverged { step })?;
    u.with_samples(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnlssFitConfig {
    pub na: usize,
    #[serde(rename = "P", alias = "degree")]
    pub degree: u32,
    pub max_iters: usize,
    pub lm_lambda0: f64,
    pub realization_count: usize,
    pub periods_per_realization: usize,
    /// Fix `D = 0` and drop input monomials from the output basis.
    #[serde(default)]
    pub force_direct_zero: bool,
}

impl Default for PnlssFitConfig {
    fn default() -> Self {
        Self {
            na: 2,
            degree: 3,
            max_iters: 100,
            lm_lambda0: 1e-3,
            realization_count: 5,
            periods_per_realization: 2,
            force_direct_zero: false,
        }
    }
}

impl PnlssFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.na == 0 {
            return Err(invalid("na must be at least 1"));
        }
        if self.degree < 2 {
            return Err(invalid("P must be at least 2"));
        }
        if self.realization_count == 0 {
            return Err(invalid("need at least one realization"));
        }
        Ok(())
    }

    fn bases(&self) -> Result<(MonomialBasis, MonomialBasis)> {
        let state = MonomialBasis::new(self.na, self.degree)?;
        let out = if self.force_direct_zero {
            state.without_input()
        } else {
            state.clone()
        };
        Ok((state, out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlssFitReport {
    /// Pooled fit over the training realizations.
    pub train: FitReport,
    /// Held-out realization, absent when only one realization was given.
    pub validation: Option<ErrorMetrics>,
    /// Relative error of the linear initialization on the same data.
    pub linear_train_relative: f64,
    pub linear_validation_relative: Option<f64>,
    pub cost_history: Vec<f64>,
}

/// Input extended by a warm-up segment; the cost ignores the first `skip`
/// samples of the simulated output.
#[derive(Debug, Clone)]
struct Record {
    u: Vec<f64>,
    y: Vec<f64>,
    skip: usize,
}

impl Record {
    /// Periodic records get their last period prepended so that the model
    /// starts close to steady state; others lose a burn-in.
    fn new(u: &SampledSignal, y: &SampledSignal, burn_in: usize) -> Self {
        match u.period_len() {
            Some(p) if p <= u.len() && p > 0 => {
                let n = u.len();
                let mut ue = u.samples()[n - p..].to_vec();
                ue.extend_from_slice(u.samples());
                let mut ye = y.samples()[n - p..].to_vec();
                ye.extend_from_slice(y.samples());
                Self { u: ue, y: ye, skip: p }
            }
            _ => Self {
                u: u.samples().to_vec(),
                y: y.samples().to_vec(),
                skip: burn_in.min(u.len() / 2),
            },
        }
    }

    fn len(&self) -> usize {
        self.u.len() - self.skip
    }

    fn target(&self) -> &[f64] {
        &self.y[self.skip..]
    }
}

fn default_burn_in(na: usize) -> usize {
    (10 * na).max(50)
}

/// Observable canonical form of `(b0 + b1 z^-1 + ... + bn z^-n) / (1 + f1 z^-1 + ... + fn z^-n)`.
fn oe_to_state_space(oe: &OeModel, na: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let mut num = vec![0.0; na + 1];
    for (i, bi) in oe.b.iter().enumerate() {
        if i + oe.nk <= na {
            num[i + oe.nk] = *bi;
        }
    }
    let mut den = vec![0.0; na + 1];
    for (j, fj) in oe.f.iter().enumerate().take(na + 1) {
        den[j] = *fj;
    }
    let d = num[0];
    let mut a = DMatrix::zeros(na, na);
    for i in 0..na {
        a[(i, 0)] = -den[i + 1];
        if i + 1 < na {
            a[(i, i + 1)] = 1.0;
        }
    }
    let b = DVector::from_fn(na, |i, _| num[i + 1] - d * den[i + 1]);
    let mut c = DVector::zeros(na);
    c[0] = 1.0;
    (a, b, c, d)
}

/// Best linear model of order `na` in observable canonical form.
pub fn init_linear_ss(
    u: &SampledSignal,
    y: &SampledSignal,
    na: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> {
    init_linear_ss_with(u, y, na, true)
}

/// As [`init_linear_ss`]; with `direct = false` the model is fitted with a
/// one-sample delay and `D = 0`.
pub fn init_linear_ss_with(
    u: &SampledSignal,
    y: &SampledSignal,
    na: usize,
    direct: bool,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> {
    if na == 0 {
        return Err(invalid("na must be at least 1"));
    }
    if u.len() < 20 * na {
        return Err(invalid(format!("{} samples are fewer than 20 x na", u.len())));
    }
    if u.len() != y.len() {
        return Err(invalid("input and output lengths differ"));
    }
    let rec = Record::new(u, y, default_burn_in(na));
    let ue = SampledSignal::new(rec.u.clone(), u.fs())?;
    let ye = SampledSignal::new(rec.y.clone(), u.fs())?;
    let (nb, nk) = if direct { (na + 1, 0) } else { (na, 1) };
    let opts = OeFitOptions {
        burn_in: Some(rec.skip.max(nb + nk)),
        ..Default::default()
    };
    let (oe, _) = fit_oe_with(&ue, &ye, nb, na, nk, &opts)?;
    Ok(oe_to_state_space(&oe, na))
}

/// Parameter vector layout: `A` row-major, `B`, `C`, `D` (if free), `E`
/// row-major, `F`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    na: usize,
    nz: usize,
    neta: usize,
    free_d: bool,
}

impl Layout {
    fn off_b(&self) -> usize {
        self.na * self.na
    }
    fn off_c(&self) -> usize {
        self.off_b() + self.na
    }
    fn off_d(&self) -> usize {
        self.off_c() + self.na
    }
    fn off_e(&self) -> usize {
        self.off_d() + usize::from(self.free_d)
    }
    fn off_f(&self) -> usize {
        self.off_e() + self.na * self.nz
    }
    fn len(&self) -> usize {
        self.off_f() + self.neta
    }

    fn pack(&self, m: &PnlssModel) -> DVector<f64> {
        let mut p = Vec::with_capacity(self.len());
        for i in 0..self.na {
            p.extend(m.a.row(i).iter());
        }
        p.extend(m.b.iter());
        p.extend(m.c.iter());
        if self.free_d {
            p.push(m.d);
        }
        for i in 0..self.na {
            p.extend(m.e.row(i).iter());
        }
        p.extend(m.f.iter());
        DVector::from_vec(p)
    }

    fn unpack(&self, p: &DVector<f64>, template: &PnlssModel) -> PnlssModel {
        let (na, nz) = (self.na, self.nz);
        PnlssModel {
            a: DMatrix::from_fn(na, na, |i, j| p[i * na + j]),
            b: DVector::from_fn(na, |i, _| p[self.off_b() + i]),
            c: DVector::from_fn(na, |i, _| p[self.off_c() + i]),
            d: if self.free_d { p[self.off_d()] } else { 0.0 },
            e: DMatrix::from_fn(na, nz, |i, m| p[self.off_e() + i * nz + m]),
            f: DVector::from_fn(self.neta, |m, _| p[self.off_f() + m]),
            basis_state: template.basis_state.clone(),
            basis_out: template.basis_out.clone(),
        }
    }
}

/// Output and its parameter sensitivities over the scored part of a record,
/// obtained by propagating `dx/dtheta` through the state recursion.
fn simulate_with_sensitivity(flat: &Flat, layout: &Layout, u: &[f64], skip: usize) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let na = layout.na;
    let nz = layout.nz;
    let neta = layout.neta;
    let nv = na + 1;
    let p = layout.len();
    let rows = u.len() - skip;
    let mut jac = DMatrix::zeros(rows, p);
    let mut y = Vec::with_capacity(rows);
    let mut x = vec![0.0; na];
    let mut xn = vec![0.0; na];
    let mut sens = vec![0.0; na * p];
    let mut sens_next = vec![0.0; na * p];
    let mut zeta = vec![0.0; nz];
    let mut dzeta = vec![0.0; nz * nv];
    let mut eta = vec![0.0; neta];
    let mut deta = vec![0.0; neta * nv];
    let mut jx = vec![0.0; na * na];
    let mut cy = vec![0.0; na];

    for (t, &ut) in u.iter().enumerate() {
        flat.bs.eval_into(&x, ut, &mut zeta, Some(&mut dzeta));
        flat.bo.eval_into(&x, ut, &mut eta, Some(&mut deta));

        if t >= skip {
            let r = t - skip;
            let mut yt = flat.d * ut;
            for i in 0..na {
                yt += flat.c[i] * x[i];
                let mut g = flat.c[i];
                for m in 0..neta {
                    g += flat.f[m] * deta[m * nv + i];
                }
                cy[i] = g;
            }
            for m in 0..neta {
                yt += flat.f[m] * eta[m];
            }
            y.push(yt);
            for k in 0..p {
                let mut acc = 0.0;
                for i in 0..na {
                    acc += cy[i] * sens[i * p + k];
                }
                jac[(r, k)] = acc;
            }
            for j in 0..na {
                jac[(r, layout.off_c() + j)] += x[j];
            }
            if layout.free_d {
                jac[(r, layout.off_d())] += ut;
            }
            for m in 0..neta {
                jac[(r, layout.off_f() + m)] += eta[m];
            }
        }

        for i in 0..na {
            for j in 0..na {
                let mut g = flat.a[i * na + j];
                for m in 0..nz {
                    g += flat.e[i * nz + m] * dzeta[m * nv + j];
                }
                jx[i * na + j] = g;
            }
        }
        for i in 0..na {
            for k in 0..p {
                let mut acc = 0.0;
                for j in 0..na {
                    acc += jx[i * na + j] * sens[j * p + k];
                }
                sens_next[i * p + k] = acc;
            }
            for j in 0..na {
                sens_next[i * p + i * na + j] += x[j];
            }
            sens_next[i * p + layout.off_b() + i] += ut;
            for m in 0..nz {
                sens_next[i * p + layout.off_e() + i * nz + m] += zeta[m];
            }
        }
        for i in 0..na {
            let mut acc = flat.b[i] * ut;
            for j in 0..na {
                acc += flat.a[i * na + j] * x[j];
            }
            for m in 0..nz {
                acc += flat.e[i * nz + m] * zeta[m];
            }
            xn[i] = acc;
        }
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut sens, &mut sens_next);
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return None;
        }
    }
    Some((y, jac))
}

impl PnlssModel {
    fn full_layout(&self) -> Layout {
        Layout {
            na: self.na(),
            nz: self.basis_state.len(),
            neta: self.basis_out.len(),
            free_d: true,
        }
    }

    /// Every coefficient in one vector: `A` row-major, `B`, `C`, `D`, `E`
    /// row-major, `F`.
    pub fn params(&self) -> DVector<f64> {
        self.full_layout().pack(self)
    }

    /// Same structure with coefficients taken from `p` (layout of [`Self::params`]).
    pub fn with_params(&self, p: &DVector<f64>) -> Result<Self> {
        let layout = self.full_layout();
        if p.len() != layout.len() {
            return Err(invalid(format!("expected {} parameters, got {}", layout.len(), p.len())));
        }
        Ok(layout.unpack(p, self))
    }
}

/// Simulated output from a zero state and its derivative with respect to
/// [`PnlssModel::params`], one row per sample.
pub fn output_jacobian(model: &PnlssModel, u: &SampledSignal) -> Result<(Vec<f64>, DMatrix<f64>)> {
    model.validate()?;
    let flat = Flat::new(model);
    simulate_with_sensitivity(&flat, &model.full_layout(), u.samples(), 0).ok_or(Error::Diverged { step: 0 })
}

struct PnlssProblem<'a> {
    records: &'a [Record],
    template: &'a PnlssModel,
    layout: Layout,
}

impl PnlssProblem<'_> {
    fn model(&self, p: &DVector<f64>) -> Option<PnlssModel> {
        let m = self.layout.unpack(p, self.template);
        (m.spectral_radius() < 1.0).then_some(m)
    }

    fn rows(&self) -> usize {
        self.records.iter().map(Record::len).sum()
    }
}

impl LeastSquaresProblem for PnlssProblem<'_> {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let m = self.model(p)?;
        let flat = Flat::new(&m);
        let parts: Option<Vec<Vec<f64>>> = self
            .records
            .par_iter()
            .map(|rec| {
                let y = flat.run(&rec.u, &vec![0.0; m.na()]).ok()?;
                Some(rec.target().iter().zip(&y[rec.skip..]).map(|(a, b)| a - b).collect())
            })
            .collect();
        let flat_res: Vec<f64> = parts?.into_iter().flatten().collect();
        Some(DVector::from_vec(flat_res))
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let m = self.model(p)?;
        let flat = Flat::new(&m);
        let parts: Option<Vec<DMatrix<f64>>> = self
            .records
            .par_iter()
            .map(|rec| simulate_with_sensitivity(&flat, &self.layout, &rec.u, rec.skip).map(|(_, j)| j))
            .collect();
        let parts = parts?;
        let mut jac = DMatrix::zeros(self.rows(), self.layout.len());
        let mut r0 = 0;
        for part in parts {
            let n = part.nrows();
            // Residual is target minus model output.
            jac.view_mut((r0, 0), (n, part.ncols())).copy_from(&(-part));
            r0 += n;
        }
        Some(jac)
    }
}

/// Rescales states to unit RMS on the given records.
fn normalize_states(model: &PnlssModel, records: &[Record]) -> PnlssModel {
    let na = model.na();
    let flat = Flat::new(model);
    let mut sq = vec![0.0; na];
    let mut count = 0usize;
    for rec in records {
        let mut x = vec![0.0; na];
        for (t, &ut) in rec.u.iter().enumerate() {
            if t >= rec.skip {
                for i in 0..na {
                    sq[i] += x[i] * x[i];
                }
                count += 1;
            }
            let xn: Vec<f64> = (0..na)
                .map(|i| flat.b[i] * ut + (0..na).map(|j| flat.a[i * na + j] * x[j]).sum::<f64>())
                .collect();
            x = xn;
        }
    }
    let s: Vec<f64> = sq
        .iter()
        .map(|v| {
            let r = (v / count.max(1) as f64).sqrt();
            if r > 0.0 && r.is_finite() { r } else { 1.0 }
        })
        .collect();
    PnlssModel {
        a: DMatrix::from_fn(na, na, |i, j| model.a[(i, j)] * s[j] / s[i]),
        b: DVector::from_fn(na, |i, _| model.b[i] / s[i]),
        c: DVector::from_fn(na, |j, _| model.c[j] * s[j]),
        ..model.clone()
    }
}

fn pooled_metrics(model: &PnlssModel, records: &[Record]) -> Result<ErrorMetrics> {
    let flat = Flat::new(model);
    let mut meas = Vec::new();
    let mut sim = Vec::new();
    for rec in records {
        let y = flat
            .run(&rec.u, &vec![0.0; model.na()])
            .map_err(|step| Error::Diverged { step })?;
        meas.extend_from_slice(rec.target());
        sim.extend_from_slice(&y[rec.skip..]);
    }
    error_metrics(&meas, &sim)
}

/// Fits on every realization except the last, which is held out for
/// validation when more than one is given.
pub fn fit_pnlss(
    us: &[SampledSignal],
    ys: &[SampledSignal],
    config: &PnlssFitConfig,
) -> Result<(PnlssModel, PnlssFitReport)> {
    config.validate()?;
    if us.is_empty() || us.len() != ys.len() {
        return Err(invalid(format!(
            "need matching non-empty input/output sets, got {} and {}",
            us.len(),
            ys.len()
        )));
    }
    if us.len() != config.realization_count {
        return Err(invalid(format!(
            "config expects {} realizations, got {}",
            config.realization_count,
            us.len()
        )));
    }
    let fs = us[0].fs();
    let len = us[0].len();
    for (u, y) in us.iter().zip(ys) {
        if u.len() != len || y.len() != len {
            return Err(invalid("all realizations must have the same length"));
        }
        if (u.fs() - fs).abs() > 1e-9 * fs || (y.fs() - fs).abs() > 1e-9 * fs {
            return Err(invalid("all realizations must share the sampling rate"));
        }
    }
    let na = config.na;
    let burn = default_burn_in(na);
    let records: Vec<Record> = us.iter().zip(ys).map(|(u, y)| Record::new(u, y, burn)).collect();
    let (train, validation) = if records.len() > 1 {
        records.split_at(records.len() - 1)
    } else {
        (&records[..], &records[..0])
    };

    let (a, b, c, d) = init_linear_ss_with(&us[0], &ys[0], na, !config.force_direct_zero)?;
    let (basis_state, basis_out) = config.bases()?;
    let linear = PnlssModel::from_linear(a, b, c, if config.force_direct_zero { 0.0 } else { d }, basis_state, basis_out)?;
    if linear.spectral_radius() >= 1.0 {
        return Err(Error::Unstable("linear initialization is unstable".into()));
    }
    let linear = normalize_states(&linear, train);

    let layout = Layout {
        na,
        nz: linear.basis_state.len(),
        neta: linear.basis_out.len(),
        free_d: !config.force_direct_zero,
    };
    let problem = PnlssProblem {
        records: train,
        template: &linear,
        layout,
    };
    let settings = LmSettings {
        lambda0: config.lm_lambda0,
        max_iters: config.max_iters,
        ..LmSettings::default()
    };
    let outcome = levenberg_marquardt(&problem, layout.pack(&linear), &settings)?;
    let model = layout.unpack(&outcome.params, &linear);

    let train_metrics = pooled_metrics(&model, train)?;
    let validation_metrics = if validation.is_empty() {
        None
    } else {
        Some(pooled_metrics(&model, validation)?)
    };
    let linear_train = pooled_metrics(&linear, train)?;
    let linear_validation = if validation.is_empty() {
        None
    } else {
        Some(pooled_metrics(&linear, validation)?.relative)
    };
    let report = PnlssFitReport {
        train: FitReport {
            rmse: (outcome.cost / problem.rows() as f64).sqrt(),
            relative_rmse: train_metrics.relative,
            iterations: outcome.iterations,
            converged: outcome.converged,
            condition_estimate: outcome.condition,
        },
        validation: validation_metrics,
        linear_train_relative: linear_train.relative,
        linear_validation_relative: linear_validation,
        cost_history: outcome.cost_history,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::numeric_jacobian;
    use crate::signals::{gen_odd_multisine, MultisineSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn monomial_values_and_order() {
        let basis = MonomialBasis::new(1, 3).unwrap();
        assert_eq!(eval_monomials(&basis, &[2.0], 3.0), vec![4.0, 6.0, 9.0, 8.0, 12.0, 18.0, 27.0]);
        assert_eq!(MonomialBasis::new(2, 2).unwrap().len(), 6);
        assert_eq!(MonomialBasis::new(2, 3).unwrap().len(), 16);
        let z = eval_monomials(&MonomialBasis::new(2, 3).unwrap(), &[0.0, 0.0], 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(MonomialBasis::new(1, 1).is_err());
        let no_u = MonomialBasis::new(1, 3).unwrap().without_input();
        assert_eq!(no_u.exponents, vec![vec![2, 0], vec![3, 0]]);
    }

    #[test]
    fn monomial_gradient_matches_differences() {
        let basis = MonomialBasis::new(2, 3).unwrap();
        let x = [0.7, -1.3];
        let u = 0.4;
        let mut vals = vec![0.0; basis.len()];
        let mut grad = vec![0.0; basis.len() * 3];
        basis.eval_into(&x, u, &mut vals, Some(&mut grad));
        let h = 1e-6;
        for v in 0..3 {
            let mut p = [x[0], x[1], u];
            let mut m = p;
            p[v] += h;
            m[v] -= h;
            let zp = eval_monomials(&basis, &p[..2], p[2]);
            let zm = eval_monomials(&basis, &m[..2], m[2]);
            for k in 0..basis.len() {
                assert!(((zp[k] - zm[k]) / (2.0 * h) - grad[k * 3 + v]).abs() < 1e-7);
            }
        }
    }

    fn multisine(seed: u64, period: usize, periods: usize, rms: f64) -> SampledSignal {
        let mut spec = MultisineSpec::new(period, period as f64, (0.0, 0.3 * period as f64), rms, seed);
        spec.periods = periods;
        gen_odd_multisine(&spec).unwrap()
    }

    fn truth_model(rng: &mut ChaCha8Rng, degree: u32, nl: f64) -> PnlssModel {
        let basis = MonomialBasis::new(2, degree).unwrap();
        let mut m = PnlssModel::from_linear(
            DMatrix::from_row_slice(2, 2, &[0.6, 0.3, -0.3, 0.6]),
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::from_vec(vec![1.0, -0.4]),
            0.2,
            basis.clone(),
            basis,
        )
        .unwrap();
        m.e = DMatrix::from_fn(2, m.basis_state.len(), |_, _| nl * rng.random_range(-1.0..1.0));
        m.f = DVector::from_fn(m.basis_out.len(), |_, _| nl * rng.random_range(-1.0..1.0));
        m
    }

    /// Steady-state periodic response: simulate one extra period and drop it.
    fn steady_response(m: &PnlssModel, u: &SampledSignal) -> SampledSignal {
        let p = u.period_len().unwrap();
        let mut ue = u.samples()[..p].to_vec();
        ue.extend_from_slice(u.samples());
        let y = Flat::new(m).run(&ue, &[0.0, 0.0]).unwrap();
        SampledSignal::periodic(y[p..].to_vec(), u.fs(), p).unwrap()
    }

    #[test]
    fn linear_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = truth_model(&mut rng, 2, 0.0);
        let u = multisine(3, 128, 2, 0.5);
        let y = simulate_pnlss(&m, &u, &[0.0, 0.0]).unwrap();
        // Plain state-space recursion as reference.
        let mut x = DVector::zeros(2);
        for (t, &ut) in u.samples().iter().enumerate() {
            let yt = m.c.dot(&x) + m.d * ut;
            assert!((yt - y.samples()[t]).abs() < 1e-12);
            x = &m.a * &x + &m.b * ut;
        }
        let zero = u.with_samples(vec![0.0; u.len()]).unwrap();
        assert!(simulate_pnlss(&m, &zero, &[0.0, 0.0]).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delay_embedding_without_direct_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = truth_model(&mut rng, 3, 0.05);
        m.d = 0.0;
        m.basis_out = m.basis_state.without_input();
        m.f = DVector::from_fn(m.basis_out.len(), |_, _| 0.05);
        let u = multisine(4, 256, 1, 0.5);
        let y = simulate_pnlss(&m, &u, &[0.0, 0.0]).unwrap();
        for _ in 0..10 {
            let t = rng.random_range(1..u.len() - 1);
            let mut bumped = u.samples().to_vec();
            bumped[t] += 1e-3;
            let y2 = simulate_pnlss(&m, &u.with_samples(bumped).unwrap(), &[0.0, 0.0]).unwrap();
            assert_eq!(y.samples()[t], y2.samples()[t]);
            assert_ne!(y.samples()[t + 1], y2.samples()[t + 1]);
        }
    }

    #[test]
    fn divergence_and_instability_reported() {
        let basis = MonomialBasis::new(1, 2).unwrap();
        let mut m = PnlssModel::from_linear(
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            0.0,
            basis.clone(),
            basis,
        )
        .unwrap();
        m.e[(0, 0)] = 1.0;
        let u = SampledSignal::new(vec![3.0; 50], 1.0).unwrap();
        assert!(matches!(simulate_pnlss(&m, &u, &[0.0]), Err(Error::Diverged { .. })));
        m.a[(0, 0)] = 1.1;
        assert!(matches!(simulate_pnlss(&m, &u, &[0.0]), Err(Error::Unstable(_))));
    }

    #[test]
    fn sensitivity_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = truth_model(&mut rng, 3, 0.05);
        let u = multisine(9, 64, 2, 0.5);
        let y = steady_response(&m, &u);
        let records = vec![Record::new(&u, &y, 0)];
        let layout = Layout {
            na: 2,
            nz: m.basis_state.len(),
            neta: m.basis_out.len(),
            free_d: true,
        };
        let problem = PnlssProblem {
            records: &records,
            template: &m,
            layout,
        };
        // Perturb away from the truth so the residuals are not zero.
        let mut p = layout.pack(&m);
        for v in p.iter_mut() {
            *v += 0.01 * rng.random_range(-1.0..1.0);
        }
        let analytic = problem.jacobian(&p).unwrap();
        let numeric = numeric_jacobian(&problem, &p, 1e-6).unwrap();
        let rel = (&analytic - &numeric).abs().max() / numeric.abs().max();
        assert!(rel < 1e-5, "relative Jacobian error {rel}");
    }

    #[test]
    fn linear_init_recovers_linear_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = truth_model(&mut rng, 2, 0.0);
        let u = multisine(5, 256, 2, 0.5);
        let y = steady_response(&m, &u);
        let (a, b, c, d) = init_linear_ss(&u, &y, 2).unwrap();
        let basis = MonomialBasis::new(2, 2).unwrap();
        let fit = PnlssModel::from_linear(a, b, c, d, basis.clone(), basis).unwrap();
        let ysim = steady_response(&fit, &u);
        assert!(error_metrics(y.samples(), ysim.samples()).unwrap().relative < 1e-6);
    }

    #[test]
    fn static_gain_init() {
        let u = multisine(6, 200, 1, 1.0);
        let y = u.with_samples(u.samples().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (a, b, c, d) = init_linear_ss(&u, &y, 1).unwrap();
        assert!(a[(0, 0)].abs() < 1e-6, "{a}");
        // Gain seen by a constant input: D + C (1 - A)^-1 B.
        let gain = d + c[0] * b[0] / (1.0 - a[(0, 0)]);
        assert!((gain - 2.0).abs() < 1e-6);
        assert!((d - 2.0).abs() < 1e-6);
    }

    fn realizations(m: &PnlssModel, count: usize, period: usize) -> (Vec<SampledSignal>, Vec<SampledSignal>) {
        let us: Vec<SampledSignal> = (0..count).map(|r| multisine(100 + r as u64, period, 2, 0.5)).collect();
        let ys = us.iter().map(|u| steady_response(m, u)).collect();
        (us, ys)
    }

    #[test]
    fn recovers_small_polynomial_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = truth_model(&mut rng, 2, 0.1);
        let (us, ys) = realizations(&truth, 3, 256);
        let cfg = PnlssFitConfig {
            na: 2,
            degree: 2,
            max_iters: 200,
            realization_count: 3,
            ..Default::default()
        };
        let (model, report) = fit_pnlss(&us, &ys, &cfg).unwrap();
        let val = report.validation.unwrap();
        assert!(val.relative < 1e-4, "validation relative error {}", val.relative);
        assert!(report.linear_validation_relative.unwrap() > val.relative);
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(model.spectral_radius() < 1.0);
    }

    #[test]
    fn linear_data_gives_negligible_nonlinear_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = truth_model(&mut rng, 2, 0.0);
        let (us, ys) = realizations(&truth, 2, 256);
        let cfg = PnlssFitConfig {
            na: 2,
            degree: 3,
            max_iters: 30,
            realization_count: 2,
            ..Default::default()
        };
        let (model, _) = fit_pnlss(&us, &ys, &cfg).unwrap();
        let full = steady_response(&model, &us[1]);
        let lin = steady_response(&model.linear_part(), &us[1]);
        let diff: f64 = full.samples().iter().zip(lin.samples()).map(|(a, b)| (a - b).powi(2)).sum();
        let power: f64 = full.samples().iter().map(|v| v * v).sum();
        assert!(diff / power < 0.01, "{}", diff / power);
    }

    #[test]
    fn forced_zero_direct_term_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth = truth_model(&mut rng, 2, 0.05);
        let (us, ys) = realizations(&truth, 2, 128);
        let cfg = PnlssFitConfig {
            na: 2,
            degree: 2,
            max_iters: 20,
            realization_count: 2,
            force_direct_zero: true,
            ..Default::default()
        };
        let (model, _) = fit_pnlss(&us, &ys, &cfg).unwrap();
        assert_eq!(model.d, 0.0);
        assert!(model.basis_out.exponents.iter().all(|e| e[2] == 0));
    }

    #[test]
    fn single_realization_has_no_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let truth = truth_model(&mut rng, 2, 0.05);
        let (us, ys) = realizations(&truth, 1, 128);
        let cfg = PnlssFitConfig {
            na: 2,
            degree: 2,
            max_iters: 5,
            realization_count: 1,
            ..Default::default()
        };
        let (_, report) = fit_pnlss(&us, &ys, &cfg).unwrap();
        assert!(report.validation.is_none());
        let bad = PnlssFitConfig { realization_count: 2, ..cfg };
        assert!(fit_pnlss(&us, &ys, &bad).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let m = truth_model(&mut rng, 3, 0.1);
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["type"], "pnlss");
        assert_eq!(v["P"], 3);
        assert_eq!(v["basis"]["state"][0], serde_json::json!([2, 0, 0]));
        assert_eq!(PnlssModel::from_json(&text).unwrap(), m);
    }
}
