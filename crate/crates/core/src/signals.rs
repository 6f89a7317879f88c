//! Excitation generators and spectral utilities.
//!
//! Everything here operates on [`SampledSignal`], a uniformly sampled real
//! record. Generators are pure functions of their arguments and seed.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniformly sampled real-valued record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    samples: Vec<f64>,
    fs: f64,
    period_len: Option<usize>,
}

impl SampledSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        Self::build(samples, fs, None)
    }

    /// A record made of whole periods of `period_len` samples.
    pub fn periodic(samples: Vec<f64>, fs: f64, period_len: usize) -> Result<Self> {
        Self::build(samples, fs, Some(period_len))
    }

    fn build(samples: Vec<f64>, fs: f64, period_len: Option<usize>) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(invalid(format!("sampling rate must be positive, got {fs}")));
        }
        if samples.is_empty() {
            return Err(invalid("signal has no samples"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite sample at index {i}")));
        }
        if let Some(p) = period_len {
            if p == 0 || !samples.len().is_multiple_of(p) {
                return Err(invalid(format!(
                    "period length {p} does not divide record length {}",
                    samples.len()
                )));
            }
        }
        Ok(Self {
            samples,
            fs,
            period_len,
        })
    }

    /// Same rate and period bookkeeping, new values.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        let period = self
            .period_len
            .filter(|p| samples.len().is_multiple_of(*p) && !samples.is_empty());
        Self::build(samples, self.fs, period)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn period_len(&self) -> Option<usize> {
        self.period_len
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.len() as f64
    }

    pub fn mean_square(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.mean_square().sqrt()
    }

    /// Contiguous sub-record `[start, start + len)`. The period is kept only
    /// when the slice starts on a period boundary and spans whole periods.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() || len == 0 {
            return Err(invalid(format!(
                "slice [{start}, {}) outside record of {} samples",
                start + len,
                self.len()
            )));
        }
        let period = self
            .period_len
            .filter(|p| start.is_multiple_of(*p) && len.is_multiple_of(*p));
        Self::build(self.samples[start..start + len].to_vec(), self.fs, period)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "index,time_s,value_v")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(w, "{},{},{}", i, i as f64 / self.fs, v)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads the `index,time_s,value_v` layout. The rate is taken from
    /// `fs` when given, otherwise inferred from the time column.
    pub fn read_csv(r: impl std::io::Read, fs: Option<f64>) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty signal file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        if header.trim() != "index,time_s,value_v" {
            return Err(Error::Parse(format!("unexpected header '{}'", header.trim())));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("line {}: expected 3 columns", lineno + 2)));
            }
            let t = f64::from_str(cols[1].trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            let v = f64::from_str(cols[2].trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            times.push(t);
            values.push(v);
        }
        let fs = match fs {
            Some(fs) => fs,
            None if times.len() >= 2 => {
                let span = times[times.len() - 1] - times[0];
                (times.len() - 1) as f64 / span
            }
            None => {
                return Err(Error::Parse(
                    "cannot infer sampling rate from fewer than two samples".into(),
                ))
            }
        };
        Self::new(values, fs)
    }

    pub fn load_csv(path: impl AsRef<Path>, fs: Option<f64>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, fs)
    }
}

/// Odd random-phase multisine definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    pub period_len: usize,
    pub fs: f64,
    /// Excited band `[f_lo, f_hi]` in Hz.
    pub band: (f64, f64),
    pub rms_amplitude: f64,
    pub seed: u64,
    /// Number of periods in the generated record.
    #[serde(default = "one")]
    pub periods: usize,
    /// One odd line out of every `detection_group` consecutive odd
    /// candidates is left unexcited. Zero keeps every odd line.
    #[serde(default = "default_detection_group")]
    pub detection_group: usize,
}

fn one() -> usize {
    1
}

fn default_detection_group() -> usize {
    4
}

impl MultisineSpec {
    pub fn new(period_len: usize, fs: f64, band: (f64, f64), rms_amplitude: f64, seed: u64) -> Self {
        Self {
            period_len,
            fs,
            band,
            rms_amplitude,
            seed,
            periods: 1,
            detection_group: default_detection_group(),
        }
    }

    pub fn bin_spacing(&self) -> f64 {
        self.fs / self.period_len as f64
    }

    /// Odd bins inside the band, before detection lines are removed.
    pub fn candidate_bins(&self) -> Vec<usize> {
        let df = self.bin_spacing();
        let half = self.period_len.div_ceil(2);
        (1..half)
            .step_by(2)
            .filter(|&k| {
                let f = k as f64 * df;
                f >= self.band.0 - 1e-9 * df && f <= self.band.1 + 1e-9 * df
            })
            .collect()
    }

    /// Bins that carry energy.
    pub fn excited_bins(&self) -> Vec<usize> {
        let candidates = self.candidate_bins();
        if self.detection_group < 2 {
            return candidates;
        }
        // Separate stream so that line selection and phases never interact.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out = Vec::with_capacity(candidates.len());
        for group in candidates.chunks(self.detection_group) {
            if group.len() < self.detection_group {
                out.extend_from_slice(group);
                continue;
            }
            let drop = rng.random_range(0..group.len());
            out.extend(group.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, k)| *k));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.period_len < 4 {
            return Err(invalid("multisine period must have at least 4 samples"));
        }
        if !(self.fs > 0.0) {
            return Err(invalid("multisine sampling rate must be positive"));
        }
        if self.periods == 0 {
            return Err(invalid("multisine needs at least one period"));
        }
        let (lo, hi) = self.band;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(invalid(format!("bad band [{lo}, {hi}]")));
        }
        if hi > self.fs / 2.0 {
            return Err(invalid(format!(
                "band edge {hi} Hz above Nyquist {} Hz",
                self.fs / 2.0
            )));
        }
        if !(self.rms_amplitude >= 0.0) {
            return Err(invalid("rms amplitude must be non-negative"));
        }
        Ok(())
    }
}

pub fn gen_white_noise(seed: u64, n: usize, sigma: f64, fs: f64) -> Result<SampledSignal> {
    if n == 0 {
        return Err(invalid("noise length must be at least one sample"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect();
    SampledSignal::new(samples, fs)
}

pub fn gen_odd_multisine(spec: &MultisineSpec) -> Result<SampledSignal> {
    spec.validate()?;
    let n = spec.period_len;
    let bins = spec.excited_bins();
    if bins.is_empty() {
        return Err(invalid("no odd bins fall inside the requested band"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for &k in &bins {
        let phase = rng.random::<f64>() * 2.0 * PI;
        let line = Complex64::from_polar(1.0, phase);
        spectrum[k] = line;
        spectrum[n - k] = line.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);
    let mut period: Vec<f64> = spectrum.iter().map(|c| c.re).collect();

    let rms = (period.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { spec.rms_amplitude / rms } else { 0.0 };
    period.iter_mut().for_each(|v| *v *= scale);

    let mut samples = Vec::with_capacity(n * spec.periods);
    for _ in 0..spec.periods {
        samples.extend_from_slice(&period);
    }
    SampledSignal::periodic(samples, spec.fs, n)
}

/// Holds each sample for `oversample` output samples.
pub fn zoh_hold(signal: &SampledSignal, oversample: usize) -> Result<SampledSignal> {
    if oversample == 0 {
        return Err(invalid("hold factor must be at least 1"));
    }
    let samples = signal
        .samples()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, oversample))
        .collect();
    SampledSignal::build(
        samples,
        signal.fs() * oversample as f64,
        signal.period_len().map(|p| p * oversample),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            // Periodic form: sums to len/2 and overlap-adds flat at 50%.
            Window::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
                .collect(),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rect" | "rectangular" | "boxcar" => Ok(Window::Rectangular),
            "hann" | "hanning" => Ok(Window::Hann),
            other => Err(invalid(format!("unknown window '{other}'"))),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Rectangular => f.write_str("rectangular"),
            Window::Hann => f.write_str("hann"),
        }
    }
}

/// One-sided averaged power spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub freqs: Vec<f64>,
    /// Power per bin (V²). Sums to the mean square for a rectangular window.
    pub power: Vec<f64>,
    pub window: Window,
}

impl SpectrumEstimate {
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "freq_hz,power_db")?;
        for (f, p) in self.freqs.iter().zip(&self.power) {
            writeln!(w, "{},{}", f, 10.0 * p.max(1e-300).log10())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchConfig {
    pub segments: usize,
    pub overlap: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            overlap: 0.5,
        }
    }
}

/// Averaged periodogram. Periodic records are averaged period by period
/// without overlap; anything else uses Welch segmentation.
pub fn power_spectrum(signal: &SampledSignal, window: &str) -> Result<SpectrumEstimate> {
    let window: Window = window.parse()?;
    if signal.len() < 64 {
        return Err(invalid(format!(
            "spectrum needs at least 64 samples, got {}",
            signal.len()
        )));
    }
    match signal.period_len() {
        Some(p) if p >= 64 => Ok(averaged_periodogram(signal, window, p, p)),
        _ => welch(signal, window, WelchConfig::default()),
    }
}

pub fn welch(signal: &SampledSignal, window: Window, cfg: WelchConfig) -> Result<SpectrumEstimate> {
    if cfg.segments == 0 || !(0.0..1.0).contains(&cfg.overlap) {
        return Err(invalid("welch needs at least one segment and overlap in [0, 1)"));
    }
    let n = signal.len();
    // n = seg + (segments - 1) * seg * (1 - overlap)
    let seg = (n as f64 / (1.0 + (cfg.segments - 1) as f64 * (1.0 - cfg.overlap))).floor() as usize;
    if seg < 8 {
        return Err(invalid("record too short for the requested segmentation"));
    }
    let hop = ((seg as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    Ok(averaged_periodogram(signal, window, seg, hop))
}

fn averaged_periodogram(signal: &SampledSignal, window: Window, seg: usize, hop: usize) -> SpectrumEstimate {
    let x = signal.samples();
    let w = window.coefficients(seg);
    let w_energy: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(seg);
    let bins = seg / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut count = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); seg];
    let mut start = 0;
    while start + seg <= x.len() {
        for (b, (xi, wi)) in buf.iter_mut().zip(x[start..start + seg].iter().zip(&w)) {
            *b = Complex64::new(xi * wi, 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        count += 1;
        start += hop;
    }
    let norm = 1.0 / (count as f64 * seg as f64 * w_energy);
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || (seg.is_multiple_of(2) && k == seg / 2) { 1.0 } else { 2.0 };
            a * norm * one_sided
        })
        .collect();
    let df = signal.fs() / seg as f64;
    SpectrumEstimate {
        freqs: (0..bins).map(|k| k as f64 * df).collect(),
        power,
        window,
    }
}

/// Complex DFT of a real record.
pub fn dft(samples: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Anti-alias treatment applied before sample omission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefilter {
    /// Plain sample omission.
    None,
    /// Zero-phase Kaiser-windowed sinc low-pass with cutoff at
    /// `cutoff_ratio` times the decimated sampling rate.
    Fir { cutoff_ratio: f64 },
    /// Brick-wall removal of everything at or above the decimated Nyquist
    /// frequency, applied on the DFT of the record.
    Ideal,
}

impl Prefilter {
    pub const DEFAULT_FIR: Prefilter = Prefilter::Fir { cutoff_ratio: 0.45 };
}

/// Keeps every `factor`-th sample, optionally after the default anti-alias
/// low-pass.
pub fn decimate(signal: &SampledSignal, factor: usize, prefilter: bool) -> Result<SampledSignal> {
    let pre = if prefilter { Prefilter::DEFAULT_FIR } else { Prefilter::None };
    decimate_with(signal, factor, pre)
}

pub fn decimate_with(signal: &SampledSignal, factor: usize, prefilter: Prefilter) -> Result<SampledSignal> {
    if factor == 0 {
        return Err(invalid("decimation factor must be at least 1"));
    }
    if !signal.len().is_multiple_of(factor) {
        return Err(invalid(format!(
            "decimation factor {factor} does not divide record length {}",
            signal.len()
        )));
    }
    if factor == 1 {
        return Ok(signal.clone());
    }
    let filtered;
    let source = match prefilter {
        Prefilter::None => signal.samples(),
        Prefilter::Fir { cutoff_ratio } => {
            if !(cutoff_ratio > 0.0 && cutoff_ratio < 0.5) {
                return Err(invalid("prefilter cutoff ratio must lie in (0, 0.5)"));
            }
            let taps = kaiser_lowpass(cutoff_ratio / factor as f64, 0.05 / factor as f64, 90.0);
            filtered = zero_phase_fir(signal, &taps);
            &filtered[..]
        }
        Prefilter::Ideal => {
            filtered = brickwall(signal.samples(), signal.len() / (2 * factor));
            &filtered[..]
        }
    };
    let samples = source.iter().step_by(factor).copied().collect();
    let period = signal
        .period_len()
        .filter(|p| p % factor == 0)
        .map(|p| p / factor);
    SampledSignal::build(samples, signal.fs() / factor as f64, period)
}

/// Windowed-sinc low-pass taps (odd length, unity DC gain). `cutoff` and
/// `transition` are in cycles per sample.
pub fn kaiser_lowpass(cutoff: f64, transition: f64, atten_db: f64) -> Vec<f64> {
    let beta = if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    };
    let mut len = ((atten_db - 7.95) / (14.36 * transition)).ceil() as usize + 1;
    if len.is_multiple_of(2) {
        len += 1;
    }
    let mid = (len / 2) as f64;
    let i0_beta = bessel_i0(beta);
    let mut taps: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let r = t / mid;
            sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Symmetric FIR applied without delay. Periodic records wrap around;
/// others are extended by odd reflection at both ends.
fn zero_phase_fir(signal: &SampledSignal, taps: &[f64]) -> Vec<f64> {
    let x = signal.samples();
    let half = taps.len() / 2;
    if signal.period_len().is_some() {
        let n = x.len();
        let mut h = vec![0.0; n];
        for (i, &t) in taps.iter().enumerate() {
            let lag = (i as isize - half as isize).rem_euclid(n as isize) as usize;
            h[lag] += t;
        }
        return circular_convolve(x, &h);
    }
    let n = x.len();
    let mut padded = Vec::with_capacity(n + 2 * half);
    for i in (1..=half).rev() {
        let src = x[i.min(n - 1)];
        padded.push(2.0 * x[0] - src);
    }
    padded.extend_from_slice(x);
    for i in 1..=half {
        let src = x[(n - 1).saturating_sub(i)];
        padded.push(2.0 * x[n - 1] - src);
    }
    let full = linear_convolve(&padded, taps);
    full[2 * half..2 * half + n].to_vec()
}

fn circular_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut xs: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut hs: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut xs);
    fwd.process(&mut hs);
    for (a, b) in xs.iter_mut().zip(&hs) {
        *a *= b;
    }
    inv.process(&mut xs);
    xs.iter().map(|c| c.re / n as f64).collect()
}

fn linear_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut xp = x.to_vec();
    xp.resize(n, 0.0);
    let mut hp = h.to_vec();
    hp.resize(n, 0.0);
    let mut y = circular_convolve(&xp, &hp);
    y.truncate(out_len);
    y
}

/// Zeroes DFT bins `k >= cutoff_bin` (and their mirrors).
fn brickwall(x: &[f64], cutoff_bin: usize) -> Vec<f64> {
    let n = x.len();
    let mut spec = dft(x);
    for k in cutoff_bin..=n / 2 {
        spec[k] = Complex64::new(0.0, 0.0);
        spec[(n - k) % n] = Complex64::new(0.0, 0.0);
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|c| c.re / n as f64).collect()
}
