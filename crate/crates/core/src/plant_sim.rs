//! Virtual continuous-time signal chain.
//!
//! Continuous time is emulated by running the generator filter and the
//! plant at an oversampled "virtual" rate and then keeping every R-th sample.
//! Linear parts are discretized exactly for a piecewise-constant excitation;
//! the Duffing plant is integrated with fixed-step RK4.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{poly_mul, poly_roots};
use crate::signals::{gen_white_noise, zoh_hold, SampledSignal};

/// Rational continuous-time transfer function, coefficients in ascending
/// powers of `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiPlant {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl LtiPlant {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        let plant = Self { num, den };
        plant.validate()?;
        Ok(plant)
    }

    /// `gain / (tau s + 1)`.
    pub fn first_order(gain: f64, tau: f64) -> Result<Self> {
        Self::new(vec![gain], vec![1.0, tau])
    }

    /// `1 / (m s^2 + d s + k1)`, the small-signal Duffing plant.
    pub fn mass_spring_damper(m: f64, d: f64, k1: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![k1, d, m])
    }

    fn trimmed(c: &[f64]) -> &[f64] {
        let mut n = c.len();
        while n > 1 && c[n - 1] == 0.0 {
            n -= 1;
        }
        &c[..n]
    }

    pub fn order(&self) -> usize {
        Self::trimmed(&self.den).len() - 1
    }

    /// Denominator degree minus numerator degree.
    pub fn relative_degree(&self) -> usize {
        self.order() - (Self::trimmed(&self.num).len() - 1)
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.first().copied().unwrap_or(0.0) / self.den[0]
    }

    pub fn poles(&self) -> Result<Vec<nalgebra::Complex<f64>>> {
        poly_roots(Self::trimmed(&self.den))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num.is_empty() || self.den.is_empty() {
            return Err(invalid("transfer function needs numerator and denominator"));
        }
        if self.num.iter().chain(&self.den).any(|c| !c.is_finite()) {
            return Err(invalid("non-finite transfer function coefficient"));
        }
        let den = Self::trimmed(&self.den);
        let num = Self::trimmed(&self.num);
        if den.len() < 2 {
            return Err(invalid("denominator must have degree at least one"));
        }
        if num.len() > den.len() {
            return Err(invalid("improper transfer function: deg(num) > deg(den)"));
        }
        if den[0] == 0.0 {
            return Err(Error::Unstable("pole at the origin".into()));
        }
        for p in self.poles()? {
            if p.re >= 0.0 {
                return Err(Error::Unstable(format!("pole {p} not in the open left half-plane")));
            }
        }
        Ok(())
    }

    /// Magnitude of `G(j 2 pi f)`.
    pub fn magnitude(&self, f: f64) -> f64 {
        let s = nalgebra::Complex::new(0.0, 2.0 * PI * f);
        let eval = |c: &[f64]| c.iter().rev().fold(nalgebra::Complex::new(0.0, 0.0), |acc, &x| acc * s + x);
        (eval(&self.num) / eval(&self.den)).norm()
    }

    /// Largest pole magnitude in Hz.
    pub fn bandwidth_hz(&self) -> Result<f64> {
        Ok(self.poles()?.iter().map(|p| p.norm()).fold(0.0, f64::max) / (2.0 * PI))
    }

    /// Controllable canonical realization of the frequency-normalized
    /// polynomial pair (a diagonal similarity of the plain canonical form,
    /// which keeps the entries of order one for any corner frequency).
    pub fn state_space(&self) -> Result<StateSpace> {
        self.validate()?;
        let den = Self::trimmed(&self.den);
        let n = den.len() - 1;
        let w0 = if den[0] != 0.0 {
            (den[0] / den[n]).abs().powf(1.0 / n as f64)
        } else {
            1.0
        };
        let scale = |c: &[f64]| -> Vec<f64> {
            c.iter().enumerate().map(|(i, v)| v * w0.powi(i as i32)).collect()
        };
        let a_norm: Vec<f64> = scale(den).iter().map(|v| v / (den[n] * w0.powi(n as i32))).collect();
        let mut b_norm: Vec<f64> = scale(Self::trimmed(&self.num))
            .iter()
            .map(|v| v / (den[n] * w0.powi(n as i32)))
            .collect();
        b_norm.resize(n + 1, 0.0);

        let mut a = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            a[(i, i + 1)] = w0;
        }
        for j in 0..n {
            a[(n - 1, j)] = -a_norm[j] * w0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = w0;
        let d = b_norm[n];
        let c = DVector::from_iterator(n, (0..n).map(|j| b_norm[j] - d * a_norm[j]));
        Ok(StateSpace { a, b, c, d })
    }
}

/// Continuous-time single-input single-output realization.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
}

impl StateSpace {
    pub fn order(&self) -> usize {
        self.b.len()
    }

    /// Exact step-invariant discretization via the exponential of the
    /// augmented matrix `[[A, B], [0, 0]] T`.
    pub fn zoh(&self, step: f64) -> DiscreteSs {
        let n = self.order();
        let mut aug = DMatrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&self.a * step));
        aug.view_mut((0, n), (n, 1)).copy_from(&(&self.b * step));
        let e = aug.exp();
        DiscreteSs {
            phi: e.view((0, 0), (n, n)).into_owned(),
            gamma: e.view((0, n), (n, 1)).column(0).into_owned(),
            c: self.c.clone(),
            d: self.d,
        }
    }

    /// `self` followed by `next`: the output of `self` drives `next`.
    /// Returns the cascade realization and the output vector of the first
    /// stage (`(c, d)` reading the intermediate signal).
    pub fn series(&self, next: &StateSpace) -> (StateSpace, DVector<f64>, f64) {
        let (n1, n2) = (self.order(), next.order());
        let n = n1 + n2;
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, n1), (n2, n2)).copy_from(&next.a);
        a.view_mut((n1, 0), (n2, n1)).copy_from(&(&next.b * self.c.transpose()));
        let mut b = DVector::zeros(n);
        b.rows_mut(0, n1).copy_from(&self.b);
        b.rows_mut(n1, n2).copy_from(&(&next.b * self.d));
        let mut c = DVector::zeros(n);
        c.rows_mut(0, n1).copy_from(&(&self.c * next.d));
        c.rows_mut(n1, n2).copy_from(&next.c);
        let mut c_mid = DVector::zeros(n);
        c_mid.rows_mut(0, n1).copy_from(&self.c);
        (
            StateSpace {
                a,
                b,
                c,
                d: self.d * next.d,
            },
            c_mid,
            self.d,
        )
    }
}

/// Discrete-time realization `x+ = phi x + gamma u`, `y = c'x + d u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSs {
    pub phi: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
}

impl DiscreteSs {
    /// Runs from zero state and returns one output sequence per readout
    /// `(c, d)` pair.
    pub fn run(&self, input: &[f64], readouts: &[(&DVector<f64>, f64)]) -> Vec<Vec<f64>> {
        let n = self.gamma.len();
        let phi: Vec<f64> = (0..n * n).map(|k| self.phi[(k / n, k % n)]).collect();
        let gamma: Vec<f64> = self.gamma.iter().copied().collect();
        let outs: Vec<(Vec<f64>, f64)> = readouts
            .iter()
            .map(|(c, d)| (c.iter().copied().collect(), *d))
            .collect();
        let mut x = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut result: Vec<Vec<f64>> = vec![Vec::with_capacity(input.len()); readouts.len()];
        for &u in input {
            for ((c, d), r) in outs.iter().zip(result.iter_mut()) {
                r.push(c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + d * u);
            }
            for i in 0..n {
                let row = &phi[i * n..(i + 1) * n];
                next[i] = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + gamma[i] * u;
            }
            std::mem::swap(&mut x, &mut next);
        }
        result
    }
}

/// Butterworth low-pass with unity DC gain.
pub fn butterworth_lowpass(order: usize, fc: f64) -> Result<LtiPlant> {
    if order == 0 {
        return Err(invalid("filter order must be at least 1"));
    }
    if !(fc > 0.0 && fc.is_finite()) {
        return Err(invalid(format!("cutoff must be positive, got {fc}")));
    }
    let wc = 2.0 * PI * fc;
    let mut den = vec![1.0];
    for k in 1..=order / 2 {
        let theta = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
        // (s - p)(s - conj p) with p = wc e^{j theta}
        den = poly_mul(&den, &[wc * wc, -2.0 * wc * theta.cos(), 1.0]);
    }
    if order % 2 == 1 {
        den = poly_mul(&den, &[wc, 1.0]);
    }
    LtiPlant::new(vec![wc.powi(order as i32)], den)
}

fn check_rate(plant: &LtiPlant, fs: f64, ratio: f64) -> Result<()> {
    let bw = plant.bandwidth_hz()?;
    if fs < ratio * bw {
        return Err(invalid(format!(
            "sampling rate {fs} Hz is below {ratio} x plant bandwidth {bw:.3} Hz"
        )));
    }
    Ok(())
}

/// Exact ZOH response of `plant` to `input`, zero initial state.
pub fn simulate_lti(plant: &LtiPlant, input: &SampledSignal) -> Result<SampledSignal> {
    let ss = plant.state_space()?;
    check_rate(plant, input.fs(), 8.0)?;
    let disc = ss.zoh(1.0 / input.fs());
    let y = disc.run(input.samples(), &[(&disc.c, disc.d)]).remove(0);
    input.with_samples(y)
}

/// `m y'' + d y' + k1 y + k3 y^3 = u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingPlant {
    pub m: f64,
    pub d: f64,
    pub k1: f64,
    pub k3: f64,
}

impl DuffingPlant {
    /// Mass 1 kg, damping ratio `zeta`, linear resonance `f_res`, no cubic term.
    pub fn linear_resonator(f_res: f64, zeta: f64) -> Self {
        let m = 1.0;
        let k1 = (2.0 * PI * f_res).powi(2) * m;
        Self {
            m,
            d: 2.0 * zeta * (k1 * m).sqrt(),
            k1,
            k3: 0.0,
        }
    }

    /// Cubic stiffness such that `k3 y^2 = fraction * k1` at displacement `y_rms`.
    pub fn with_cubic_fraction(self, y_rms: f64, fraction: f64) -> Self {
        Self {
            k3: fraction * self.k1 / (y_rms * y_rms),
            ..self
        }
    }

    pub fn resonance_hz(&self) -> f64 {
        (self.k1 / self.m).sqrt() / (2.0 * PI)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.d >= 0.0 && self.k1 > 0.0 && self.k3.is_finite()) {
            return Err(invalid(format!("invalid Duffing parameters {self:?}")));
        }
        Ok(())
    }

    pub fn linearized(&self) -> Result<LtiPlant> {
        LtiPlant::mass_spring_damper(self.m, self.d, self.k1)
    }

    fn accel(&self, y: f64, v: f64, u: f64) -> f64 {
        (u - self.d * v - self.k1 * y - self.k3 * y * y * y) / self.m
    }
}

/// Fixed-step RK4 integration of the Duffing equation driven by a forcing
/// function of time. Returns `(y, v)` at `t = 0, h, ..., n_steps h`.
pub fn duffing_rk4(
    plant: &DuffingPlant,
    forcing: impl Fn(f64) -> f64,
    step: f64,
    n_steps: usize,
    initial: (f64, f64),
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let (mut y, mut v) = initial;
    out.push((y, v));
    for k in 0..n_steps {
        let t = k as f64 * step;
        let (u0, um, u1) = (forcing(t), forcing(t + 0.5 * step), forcing(t + step));
        let (k1y, k1v) = (v, plant.accel(y, v, u0));
        let (k2y, k2v) = (v + 0.5 * step * k1v, plant.accel(y + 0.5 * step * k1y, v + 0.5 * step * k1v, um));
        let (k3y, k3v) = (v + 0.5 * step * k2v, plant.accel(y + 0.5 * step * k2y, v + 0.5 * step * k2v, um));
        let (k4y, k4v) = (v + step * k3v, plant.accel(y + step * k3y, v + step * k3v, u1));
        y += step / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        v += step / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        out.push((y, v));
    }
    out
}

/// Displacement response to a held (piecewise-constant) force record.
pub fn simulate_duffing(plant: &DuffingPlant, input: &SampledSignal) -> Result<SampledSignal> {
    plant.validate()?;
    if input.fs() < 50.0 * plant.resonance_hz() {
        return Err(invalid(format!(
            "sampling rate {} Hz is below 50 x resonance {:.3} Hz",
            input.fs(),
            plant.resonance_hz()
        )));
    }
    let u = input.samples();
    let h = 1.0 / input.fs();
    let limit = divergence_limit(plant, input);
    let mut y_out = Vec::with_capacity(u.len());
    let (mut y, mut v): (f64, f64) = (0.0, 0.0);
    for (k, &uk) in u.iter().enumerate() {
        if !y.is_finite() || y.abs() > limit {
            return Err(Error::Diverged { step: k });
        }
        y_out.push(y);
        let f = |_: f64| uk;
        let next = duffing_rk4(plant, f, h, 1, (y, v));
        (y, v) = next[1];
    }
    input.with_samples(y_out)
}

fn divergence_limit(plant: &DuffingPlant, input: &SampledSignal) -> f64 {
    1e6 * (input.rms().max(f64::MIN_POSITIVE) / plant.k1).max(1e-300)
}

/// Plant driven by the chain.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    Lti(LtiPlant),
    Duffing(DuffingPlant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimChainConfig {
    pub generator_filter: LtiPlant,
    /// Virtual-continuous rate is `oversample * fs_target`.
    pub oversample: usize,
    pub noise_u_std: f64,
    pub noise_y_std: f64,
    pub noise_seed: u64,
}

impl SimChainConfig {
    pub fn new(generator_filter: LtiPlant, oversample: usize) -> Self {
        Self {
            generator_filter,
            oversample,
            noise_u_std: 0.0,
            noise_y_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn integrator_step(&self, fs_target: f64) -> f64 {
        1.0 / (self.oversample as f64 * fs_target)
    }
}

/// Plant input and output sampled at `fs_target`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub u: SampledSignal,
    pub y: SampledSignal,
}

/// Drives generator filter and plant at the virtual rate, then keeps every
/// R-th sample of the plant input and output.
pub fn run_chain(
    config: &SimChainConfig,
    plant: &PlantKind,
    excitation: &SampledSignal,
    fs_target: f64,
) -> Result<ChainOutput> {
    if config.oversample == 0 {
        return Err(invalid("oversample must be at least 1"));
    }
    if !(fs_target > 0.0) {
        return Err(invalid("target rate must be positive"));
    }
    let r = config.oversample;
    let fs_virtual = r as f64 * fs_target;
    let hold = fs_virtual / excitation.fs();
    let hold_int = hold.round();
    if hold_int < 1.0 || (hold - hold_int).abs() > 1e-9 * hold {
        return Err(invalid(format!(
            "excitation rate {} Hz does not divide virtual rate {fs_virtual} Hz",
            excitation.fs()
        )));
    }
    let excitation = zoh_hold(excitation, hold_int as usize)?;
    let e = excitation.samples();
    let gen = config.generator_filter.state_space()?;
    let step = 1.0 / fs_virtual;

    let (u_virtual, y_virtual) = match plant {
        PlantKind::Lti(p) => {
            let (cascade, c_mid, d_mid) = gen.series(&p.state_space()?);
            let disc = cascade.zoh(step);
            let mut outs = disc.run(e, &[(&c_mid, d_mid), (&disc.c, disc.d)]);
            let y = outs.pop().unwrap();
            (outs.pop().unwrap(), y)
        }
        PlantKind::Duffing(p) => {
            p.validate()?;
            duffing_chain(&gen, p, e, step)?
        }
    };

    let keep = |v: Vec<f64>| -> Vec<f64> { v.into_iter().step_by(r).collect() };
    let mut u = keep(u_virtual);
    let mut y = keep(y_virtual);
    if config.noise_u_std > 0.0 {
        let n = gen_white_noise(config.noise_seed, u.len(), config.noise_u_std, fs_target)?;
        u.iter_mut().zip(n.samples()).for_each(|(a, b)| *a += b);
    }
    if config.noise_y_std > 0.0 {
        let n = gen_white_noise(config.noise_seed ^ 0xa5a5_5a5a, y.len(), config.noise_y_std, fs_target)?;
        y.iter_mut().zip(n.samples()).for_each(|(a, b)| *a += b);
    }
    let period = excitation
        .period_len()
        .filter(|p| p % r == 0)
        .map(|p| p / r)
        .filter(|p| u.len() % p == 0);
    let make = |v: Vec<f64>| match period {
        Some(p) => SampledSignal::periodic(v, fs_target, p),
        None => SampledSignal::new(v, fs_target),
    };
    Ok(ChainOutput {
        u: make(u)?,
        y: make(y)?,
    })
}

/// Generator states plus Duffing position and velocity, integrated together
/// with RK4 under a held excitation.
fn duffing_chain(gen: &StateSpace, plant: &DuffingPlant, e: &[f64], step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let ng = gen.order();
    let n = ng + 2;
    let a: Vec<f64> = (0..ng * ng).map(|k| gen.a[(k / ng, k % ng)]).collect();
    let b: Vec<f64> = gen.b.iter().copied().collect();
    let c: Vec<f64> = gen.c.iter().copied().collect();
    let d = gen.d;
    let deriv = |x: &[f64], ek: f64, out: &mut [f64]| {
        for i in 0..ng {
            out[i] = a[i * ng..(i + 1) * ng].iter().zip(&x[..ng]).map(|(p, q)| p * q).sum::<f64>() + b[i] * ek;
        }
        let u = c.iter().zip(&x[..ng]).map(|(p, q)| p * q).sum::<f64>() + d * ek;
        out[ng] = x[ng + 1];
        out[ng + 1] = plant.accel(x[ng], x[ng + 1], u);
    };
    let e_rms = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
    let gen_gain = c.iter().map(|v| v.abs()).sum::<f64>() + d.abs() + 1.0;
    let limit = 1e6 * (e_rms * gen_gain / plant.k1).max(1e-300);

    let mut x = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut u_out = Vec::with_capacity(e.len());
    let mut y_out = Vec::with_capacity(e.len());
    for (k, &ek) in e.iter().enumerate() {
        let y: f64 = x[ng];
        if !y.is_finite() || y.abs() > limit {
            return Err(Error::Diverged { step: k });
        }
        u_out.push(c.iter().zip(&x[..ng]).map(|(p, q)| p * q).sum::<f64>() + d * ek);
        y_out.push(y);
        deriv(&x, ek, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * step * k1[i];
        }
        deriv(&tmp, ek, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * step * k2[i];
        }
        deriv(&tmp, ek, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + step * k3[i];
        }
        deriv(&tmp, ek, &mut k4);
        for i in 0..n {
            x[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok((u_out, y_out))
}

/// Samples of the continuous impulse response `g_c(k / fs)` of the strictly
/// proper part of `plant`. A direct feed-through (relative degree zero) is
/// an impulse in `g_c` and is left out.
pub fn impulse_invariant(plant: &LtiPlant, fs: f64, len: usize) -> Result<Vec<f64>> {
    if !(fs > 0.0) {
        return Err(invalid("sampling rate must be positive"));
    }
    let ss = plant.state_space()?;
    let phi = (&ss.a * (1.0 / fs)).exp();
    let mut x = ss.b.clone();
    let mut g = Vec::with_capacity(len);
    for _ in 0..len {
        g.push(ss.c.dot(&x));
        x = &phi * x;
    }
    Ok(g)
}

/// `|g_d(0)| / max_k |g_d(k)|` over a window long enough for the impulse
/// response to decay.
pub fn direct_term_ratio(plant: &LtiPlant, fs: f64) -> Result<f64> {
    let slowest = plant
        .poles()?
        .iter()
        .map(|p| -p.re)
        .fold(f64::INFINITY, f64::min);
    let len = ((10.0 * fs / slowest).ceil() as usize + 2).min(1_000_000);
    let g = impulse_invariant(plant, fs, len)?;
    let peak = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(0.0);
    }
    Ok(g[0].abs() / peak)
}

/// Generator filter section of a plant configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub order: usize,
    pub fc_hz: f64,
}

impl GeneratorSpec {
    pub fn filter(&self) -> Result<LtiPlant> {
        butterworth_lowpass(self.order, self.fc_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PlantSpec {
    Lti { num: Vec<f64>, den: Vec<f64> },
    Duffing { m: f64, d: f64, k1: f64, k3: f64 },
}

impl PlantSpec {
    pub fn build(&self) -> Result<PlantKind> {
        Ok(match self {
            PlantSpec::Lti { num, den } => PlantKind::Lti(LtiPlant::new(num.clone(), den.clone())?),
            PlantSpec::Duffing { m, d, k1, k3 } => {
                let p = DuffingPlant {
                    m: *m,
                    d: *d,
                    k1: *k1,
                    k3: *k3,
                };
                p.validate()?;
                PlantKind::Duffing(p)
            }
        })
    }
}

/// JSON plant descriptor: `{"type": "lti", "num": [...], "den": [...],
/// "generator_filter": {"order": 4, "fc_hz": 100}, "oversample": 32}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    #[serde(flatten)]
    pub plant: PlantSpec,
    pub generator_filter: GeneratorSpec,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
}

pub fn default_oversample() -> usize {
    32
}

impl PlantConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn chain(&self) -> Result<SimChainConfig> {
        Ok(SimChainConfig::new(self.generator_filter.filter()?, self.oversample))
    }
}
