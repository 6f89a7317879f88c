//! Experiment sweeps and report writing.
//!
//! Every sweep cell derives its own random seed from the root seed and the
//! cell coordinates, so results do not depend on how cells are scheduled.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bounds::{fit_loglog_slope, SlopeFit};
use crate::error::{invalid, Error, Result};
use crate::plant_sim::{
    default_oversample, run_chain, DuffingPlant, GeneratorSpec, LtiPlant, PlantKind, PlantSpec, SimChainConfig,
};
use crate::signals::{
    decimate_with, gen_odd_multisine, gen_white_noise, power_spectrum, MultisineSpec, Prefilter, SampledSignal,
    SpectrumEstimate,
};
use crate::sysid_linear::{fit_ar_predictor, fit_oe_with, predict_one_step, OeFitOptions};
use crate::sysid_pnlss::{fit_pnlss, PnlssFitConfig, PnlssFitReport, PnlssModel};

pub use crate::metrics::{error_metrics, ErrorMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PredictionSweep,
    OeSweep,
    PnlssSweep,
    AliasingStudy,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PredictionSweep => "prediction_sweep",
            ExperimentKind::OeSweep => "oe_sweep",
            ExperimentKind::PnlssSweep => "pnlss_sweep",
            ExperimentKind::AliasingStudy => "aliasing_study",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OeOrders {
    pub nb: usize,
    pub nf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OeSweepSettings {
    /// Orders of the model with a free direct term.
    pub direct: OeOrders,
    /// Orders of the model with the one-sample delay.
    pub delayed: OeOrders,
    /// Output noise standard deviation relative to the output RMS.
    pub output_noise_rel: f64,
    /// Slope points must exceed the noise floor by this many dB.
    pub floor_margin_db: f64,
    /// Leading stretch of every record left out of the cost, in seconds.
    /// Never shorter than the fitting default.
    pub burn_in_s: f64,
}

impl Default for OeSweepSettings {
    fn default() -> Self {
        Self {
            direct: OeOrders { nb: 2, nf: 2 },
            delayed: OeOrders { nb: 2, nf: 4 },
            output_noise_rel: 1e-7,
            floor_margin_db: 20.0,
            burn_in_s: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlssSweepSettings {
    pub fit: PnlssFitConfig,
    /// Frequency resolution of the multisine; one period lasts `1 / resolution_hz`.
    pub resolution_hz: f64,
    pub band_hz: (f64, f64),
    pub input_rms: f64,
    /// Leading periods simulated and discarded so the plant reaches steady state.
    pub transient_periods: usize,
    /// Used when no plant is configured.
    pub resonance_hz: f64,
    pub damping_ratio: f64,
    /// Cubic spring force as a fraction of the linear one at the RMS
    /// displacement of a linear pre-run.
    pub cubic_fraction: f64,
}

impl Default for PnlssSweepSettings {
    fn default() -> Self {
        Self {
            fit: PnlssFitConfig::default(),
            resolution_hz: 1.0,
            band_hz: (0.0, 100.0),
            input_rms: 0.127,
            transient_periods: 1,
            resonance_hz: 70.0,
            damping_ratio: 0.05,
            cubic_fraction: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Plant under test. Defaults to a first-order RC section for the OE
    /// sweep and a Duffing oscillator for the nonlinear sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSpec>,
    pub generator: GeneratorSpec,
    /// Virtual-continuous rate as a multiple of the highest sampling rate.
    pub oversample: usize,
    pub fs_grid: Vec<f64>,
    /// Generator cut-off frequencies (prediction sweep only).
    #[serde(default)]
    pub bandwidth_grid: Vec<f64>,
    #[serde(default)]
    pub ar_orders: Vec<usize>,
    /// Samples per identification record at every sampling rate.
    pub record_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub oe: OeSweepSettings,
    #[serde(default)]
    pub pnlss: PnlssSweepSettings,
}

impl ExperimentConfig {
    pub fn default_for(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: kind,
            plant: None,
            generator: GeneratorSpec { order: 4, fc_hz: 100.0 },
            oversample: default_oversample(),
            fs_grid: Vec::new(),
            bandwidth_grid: Vec::new(),
            ar_orders: Vec::new(),
            record_len: 1 << 14,
            seed: 1,
            oe: OeSweepSettings::default(),
            pnlss: PnlssSweepSettings::default(),
        };
        match kind {
            ExperimentKind::PredictionSweep => Self {
                fs_grid: vec![78125.0],
                bandwidth_grid: vec![100.0, 1000.0, 10000.0],
                ar_orders: vec![2, 10, 40],
                ..base
            },
            ExperimentKind::OeSweep => Self {
                fs_grid: vec![625.0, 1250.0, 3125.0, 6250.0, 15625.0, 31250.0, 78125.0, 156250.0],
                oversample: 8,
                ..base
            },
            ExperimentKind::PnlssSweep | ExperimentKind::AliasingStudy => Self {
                fs_grid: vec![200.0, 400.0, 800.0, 1600.0],
                generator: GeneratorSpec { order: 4, fc_hz: 200.0 },
                ..base
            },
        }
    }

    /// Reads a JSON config; fields that are left out take the defaults of
    /// the named experiment.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(text).map_err(|e| Error::json("experiment config", e))?;
        let kind: ExperimentKind = serde_json::from_value(
            given
                .get("experiment")
                .cloned()
                .ok_or_else(|| invalid("config is missing the \"experiment\" field"))?,
        )
        .map_err(|e| Error::json("experiment", e))?;
        let mut merged = serde_json::to_value(Self::default_for(kind)).map_err(|e| Error::json("defaults", e))?;
        merge(&mut merged, given);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::json("experiment config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { context, source } => Error::Json {
                context: format!("{}: {context}", path.display()),
                source,
            },
            Error::InvalidArgument(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.fs_grid.is_empty() {
            return Err(invalid("fs_grid must not be empty"));
        }
        if self.fs_grid.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(invalid("fs_grid entries must be positive"));
        }
        if self.oversample == 0 {
            return Err(invalid("oversample must be at least 1"));
        }
        if self.record_len < 64 {
            return Err(invalid("record_len must be at least 64"));
        }
        match self.experiment {
            ExperimentKind::PredictionSweep => {
                if self.bandwidth_grid.is_empty() || self.ar_orders.is_empty() {
                    return Err(invalid("prediction sweep needs bandwidth_grid and ar_orders"));
                }
            }
            ExperimentKind::OeSweep => {
                let top = self.max_fs();
                for &fs in &self.fs_grid {
                    integer_ratio(top, fs)?;
                }
            }
            ExperimentKind::PnlssSweep | ExperimentKind::AliasingStudy => {
                let virt = self.virtual_rate();
                for &fs in &self.fs_grid {
                    integer_ratio(virt, fs)?;
                    integer_ratio(fs, self.pnlss.resolution_hz)?;
                }
                integer_ratio(virt, self.pnlss.resolution_hz)?;
                self.pnlss.fit.validate()?;
            }
        }
        Ok(())
    }

    fn max_fs(&self) -> f64 {
        self.fs_grid.iter().cloned().fold(0.0, f64::max)
    }

    /// Rate of the simulated continuous-time chain.
    pub fn virtual_rate(&self) -> f64 {
        self.max_fs() * self.oversample as f64
    }

    /// Short hex digest of the canonical config JSON.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && k != "plant" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn integer_ratio(num: f64, den: f64) -> Result<usize> {
    let r = num / den;
    let ri = r.round();
    if ri < 1.0 || (r - ri).abs() > 1e-9 * r {
        return Err(invalid(format!("{den} Hz does not divide {num} Hz")));
    }
    Ok(ri as usize)
}

/// Seed of one sweep cell, independent of every other cell.
pub fn cell_seed(root: u64, coords: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub fs_hz: f64,
    pub bandwidth_hz: Option<f64>,
    /// Model or quantity the row describes, such as `ar40`, `oe_nk1`,
    /// `pnlss_validation` or `aliasing`.
    pub model: String,
    pub rmse: f64,
    pub relative_rmse_db: f64,
    pub margin_db: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

impl ReportRow {
    fn new(fs_hz: f64, model: impl Into<String>) -> Self {
        Self {
            fs_hz,
            bandwidth_hz: None,
            model: model.into(),
            rmse: f64::NAN,
            relative_rmse_db: f64::NAN,
            margin_db: None,
            iterations: None,
            converged: None,
            status: "ok".into(),
        }
    }

    fn failed(fs_hz: f64, model: impl Into<String>, err: &Error) -> Self {
        Self {
            status: format!("failed: {err}"),
            ..Self::new(fs_hz, model)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSlope {
    pub label: String,
    pub fit: SlopeFit,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub slopes: Vec<NamedSlope>,
    pub checks: Vec<Check>,
    pub spectra: Vec<(String, SpectrumEstimate)>,
    /// File stem and JSON text of every fitted model.
    pub models: Vec<(String, String)>,
}

impl ExperimentReport {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            experiment: cfg.experiment,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            rows: Vec::new(),
            slopes: Vec::new(),
            checks: Vec::new(),
            spectra: Vec::new(),
            models: Vec::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn slope(&self, label: &str) -> Option<&NamedSlope> {
        self.slopes.iter().find(|s| s.label == label)
    }

    pub fn rows_for<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.model == model)
    }

    pub const CSV_HEADER: &'static str =
        "config_hash,experiment,fs_hz,bandwidth_hz,model,rmse_v,relative_rmse_db,margin_db,iterations,converged,status";

    pub fn rows_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:e},{},{},{},{},{}",
                self.config_hash,
                self.experiment.name(),
                r.fs_hz,
                opt(r.bandwidth_hz.map(|b| b.to_string())),
                r.model,
                r.rmse,
                r.relative_rmse_db,
                opt(r.margin_db.map(|m| m.to_string())),
                opt(r.iterations.map(|i| i.to_string())),
                opt(r.converged.map(|c| c.to_string())),
                r.status.replace(',', ";"),
            );
        }
        out
    }

    pub fn summary_json(&self) -> Value {
        serde_json::json!({
            "experiment": self.experiment.name(),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "rows": self.rows.len(),
            "failed_cells": self.rows.iter().filter(|r| !r.is_ok()).count(),
            "slopes": self.slopes,
            "checks": self.checks,
            "all_passed": self.all_passed(),
            "spectra": self.spectra.iter().map(|(n, _)| format!("spectra/{n}.csv")).collect::<Vec<_>>(),
            "models": self.models.iter().map(|(n, _)| format!("models/{n}.json")).collect::<Vec<_>>(),
        })
    }

    /// Writes `report.json`, `rows.csv`, `spectra/*.csv` and `models/*.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let spectra = dir.join("spectra");
        let models = dir.join("models");
        for d in [dir, &spectra, &models] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let write = |path: &Path, text: &str| std::fs::write(path, text).map_err(|e| Error::io(path, e));
        let mut summary = serde_json::to_string_pretty(&self.summary_json()).map_err(|e| Error::json("report", e))?;
        summary.push('\n');
        write(&dir.join("report.json"), &summary)?;
        write(&dir.join("rows.csv"), &self.rows_csv())?;
        for (name, est) in &self.spectra {
            let mut buf = Vec::new();
            est.write_csv(&mut buf).map_err(|e| Error::io(spectra.join(name), e))?;
            let path = spectra.join(format!("{name}.csv"));
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        for (name, json) in &self.models {
            write(&models.join(format!("{name}.json")), json)?;
        }
        Ok(())
    }
}

/// Runs `f` over `cells` on `jobs` threads (all cores when zero). Results
/// keep the order of `cells`.
fn run_cells<C: Sync, R: Send>(cells: &[C], jobs: usize, f: impl Fn(&C) -> R + Sync) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(&f).collect()))
}

pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::PredictionSweep => run_prediction_sweep(cfg, jobs),
        ExperimentKind::OeSweep => run_oe_sweep(cfg, jobs),
        ExperimentKind::PnlssSweep => run_pnlss_sweep(cfg, jobs),
        ExperimentKind::AliasingStudy => run_aliasing_study(cfg, jobs),
    }
}

fn db(v: f64) -> f64 {
    20.0 * v.log10()
}

/// Band-limited record: white noise at `oversample * fs` through the
/// generator filter, then every `oversample`-th sample, scaled to unit RMS.
pub fn band_limited_record(generator: &LtiPlant, fs: f64, oversample: usize, len: usize, seed: u64) -> Result<SampledSignal> {
    let rate = fs * oversample as f64;
    let slowest = generator
        .poles()?
        .iter()
        .map(|p| -p.re)
        .fold(f64::INFINITY, f64::min);
    let warmup = ((20.0 / slowest) * fs).ceil() as usize;
    let total = (len + warmup) * oversample;
    let noise = gen_white_noise(seed, total, 1.0, rate)?;
    let ss = generator.state_space()?.zoh(1.0 / rate);
    let out = ss.run(noise.samples(), &[(&ss.c, ss.d)]).pop().expect("one readout");
    let kept: Vec<f64> = out.into_iter().step_by(oversample).skip(warmup).collect();
    let rms = (kept.iter().map(|v| v * v).sum::<f64>() / kept.len() as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::DegenerateInput("generator produced a zero record".into()));
    }
    SampledSignal::new(kept.into_iter().map(|v| v / rms).collect(), fs)
}

/// Exponent of prediction error power against fs: `-slope / 10` of the
/// RMS curve in dB per decade.
pub fn power_law_exponent(fit: &SlopeFit) -> f64 {
    -fit.slope_db_per_decade / 10.0
}

pub fn run_prediction_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(cfg);
    let mut cells = Vec::new();
    for (bi, &bw) in cfg.bandwidth_grid.iter().enumerate() {
        for (fi, &fs) in cfg.fs_grid.iter().enumerate() {
            cells.push((bi, bw, fi, fs));
        }
    }
    let results = run_cells(&cells, jobs, |&(bi, bw, fi, fs)| {
        let seed = cell_seed(cfg.seed, &[0, bi as u64, fi as u64]);
        let gen = GeneratorSpec {
            order: cfg.generator.order,
            fc_hz: bw,
        };
        let rows: Vec<ReportRow> = match gen.filter().and_then(|g| band_limited_record(&g, fs, cfg.oversample, cfg.record_len, seed)) {
            Err(e) => cfg.ar_orders.iter().map(|o| ReportRow::failed(fs, format!("ar{o}"), &e)).collect(),
            Ok(u) => cfg
                .ar_orders
                .iter()
                .map(|&order| {
                    let mut row = ReportRow::new(fs, format!("ar{order}"));
                    row.bandwidth_hz = Some(bw);
                    match fit_ar_predictor(&u, order).and_then(|m| predict_one_step(&m, &u)) {
                        Ok((_, rmse)) => {
                            row.rmse = rmse;
                            row.relative_rmse_db = db(rmse / u.rms());
                        }
                        Err(e) => row = ReportRow { bandwidth_hz: Some(bw), ..ReportRow::failed(fs, row.model, &e) },
                    }
                    row
                })
                .collect(),
        };
        rows
    })?;
    report.rows = results.into_iter().flatten().collect();

    // Error power against fs for each bandwidth and order.
    for &bw in &cfg.bandwidth_grid {
        for &order in &cfg.ar_orders {
            let label = format!("ar{order}");
            let pts: Vec<(f64, f64)> = report
                .rows
                .iter()
                .filter(|r| r.is_ok() && r.model == label && r.bandwidth_hz == Some(bw))
                .map(|r| (r.fs_hz, 10f64.powf(r.relative_rmse_db / 20.0)))
                .collect();
            if let Ok(fit) = fit_loglog_slope(&pts) {
                report.slopes.push(NamedSlope {
                    label: format!("{label}_bw{bw}"),
                    fit,
                    points: pts.len(),
                });
            }
        }
    }

    // Error grows with bandwidth at fixed fs and order.
    const TOL_DB: f64 = 0.5;
    for &fs in &cfg.fs_grid {
        for &order in &cfg.ar_orders {
            let label = format!("ar{order}");
            let mut curve: Vec<(f64, f64)> = report
                .rows
                .iter()
                .filter(|r| r.is_ok() && r.model == label && r.fs_hz == fs)
                .map(|r| (r.bandwidth_hz.unwrap_or(0.0), r.relative_rmse_db))
                .collect();
            curve.sort_by(|a, b| a.0.total_cmp(&b.0));
            if curve.len() > 1 {
                let ok = curve.windows(2).all(|w| w[1].1 >= w[0].1 - TOL_DB);
                report.checks.push(Check::new(
                    format!("monotone_in_bandwidth_{label}_fs{fs}"),
                    ok,
                    format!("{curve:?}"),
                ));
            }
        }
    }
    if let (Some(&lo), Some(&hi)) = (cfg.ar_orders.iter().min(), cfg.ar_orders.iter().max()) {
        if lo != hi {
            for &fs in &cfg.fs_grid {
                for &bw in &cfg.bandwidth_grid {
                    let get = |o: usize| {
                        report
                            .rows
                            .iter()
                            .find(|r| r.model == format!("ar{o}") && r.fs_hz == fs && r.bandwidth_hz == Some(bw) && r.is_ok())
                            .map(|r| r.rmse)
                    };
                    if let (Some(a), Some(b)) = (get(lo), get(hi)) {
                        report.checks.push(Check::new(
                            format!("higher_order_not_worse_fs{fs}_bw{bw}"),
                            b <= a,
                            format!("ar{lo} {a:e}, ar{hi} {b:e}"),
                        ));
                    }
                }
            }
        }
    }
    if let (Some(&bw), Some(&fs)) = (cfg.bandwidth_grid.first(), cfg.fs_grid.first()) {
        let gen = GeneratorSpec {
            order: cfg.generator.order,
            fc_hz: bw,
        }
        .filter()?;
        let u = band_limited_record(&gen, fs, cfg.oversample, cfg.record_len, cell_seed(cfg.seed, &[0, 0, 0]))?;
        report.spectra.push((format!("u_bw{bw}_fs{fs}"), power_spectrum(&u, "hann")?));
    }
    Ok(report)
}

fn default_rc_plant() -> PlantSpec {
    PlantSpec::Lti {
        num: vec![1.0],
        den: vec![1.0, 1.0 / (2.0 * std::f64::consts::PI * 1000.0)],
    }
}

/// Plant input and output at the highest grid rate, with output noise.
fn oe_base_record(cfg: &ExperimentConfig, plant: &PlantKind) -> Result<(SampledSignal, SampledSignal)> {
    let top = cfg.max_fs();
    let low = cfg.fs_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = integer_ratio(top, low)?;
    let gen = cfg.generator.filter()?;
    let slowest = gen.poles()?.iter().map(|p| -p.re).fold(f64::INFINITY, f64::min);
    let warmup = ((20.0 / slowest) * top).ceil() as usize;
    let len = cfg.record_len * span;
    let rate = top * cfg.oversample as f64;
    let excitation = gen_white_noise(cell_seed(cfg.seed, &[1]), len + warmup, (rate / top).sqrt(), top)?;
    let chain = SimChainConfig::new(gen, cfg.oversample);
    let out = run_chain(&chain, plant, &excitation, top)?;
    let u = out.u.slice(warmup, len)?;
    let mut y = out.y.slice(warmup, len)?.into_samples();
    let noise_std = cfg.oe.output_noise_rel * rms(&y);
    if noise_std > 0.0 {
        let n = gen_white_noise(cell_seed(cfg.seed, &[2]), len, noise_std, top)?;
        y.iter_mut().zip(n.samples()).for_each(|(a, b)| *a += b);
    }
    Ok((u, SampledSignal::new(y, top)?))
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn run_oe_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(cfg);
    let plant = cfg.plant.clone().unwrap_or_else(default_rc_plant).build()?;
    let (u, y) = oe_base_record(cfg, &plant)?;
    report.spectra.push(("u_base".into(), power_spectrum(&u, "hann")?));
    report.spectra.push(("y_base".into(), power_spectrum(&y, "hann")?));
    let top = cfg.max_fs();
    let variants = [(0usize, cfg.oe.direct), (1usize, cfg.oe.delayed)];
    let cells: Vec<(f64, usize, OeOrders)> = cfg
        .fs_grid
        .iter()
        .flat_map(|&fs| variants.iter().map(move |&(nk, o)| (fs, nk, o)))
        .collect();
    let results = run_cells(&cells, jobs, |&(fs, nk, orders)| {
        let label = format!("oe_nk{nk}");
        let fit = || -> Result<(ReportRow, String)> {
            let factor = integer_ratio(top, fs)?;
            let ud = decimate_with(&u, factor, Prefilter::None)?.slice(0, cfg.record_len)?;
            let yd = decimate_with(&y, factor, Prefilter::None)?.slice(0, cfg.record_len)?;
            let opts = OeFitOptions {
                burn_in: Some((orders.nf.max(orders.nb + nk).max(50)).max((cfg.oe.burn_in_s * fs).ceil() as usize)),
                ..Default::default()
            };
            let (model, fr) = fit_oe_with(&ud, &yd, orders.nb, orders.nf, nk, &opts)?;
            let mut row = ReportRow::new(fs, label.clone());
            row.rmse = fr.rmse;
            row.relative_rmse_db = fr.relative_rmse_db();
            row.iterations = Some(fr.iterations);
            row.converged = Some(fr.converged);
            let json = serde_json::to_string_pretty(&model).map_err(|e| Error::json("OE model", e))?;
            Ok((row, json))
        };
        fit().map_err(|e| ReportRow::failed(fs, label.clone(), &e))
    })?;
    for ((fs, nk, _), res) in cells.iter().zip(results) {
        match res {
            Ok((row, json)) => {
                report.rows.push(row);
                report.models.push((format!("oe_nk{nk}_fs{fs}"), json));
            }
            Err(row) => report.rows.push(row),
        }
    }

    let floor_db = if cfg.oe.output_noise_rel > 0.0 {
        db(cfg.oe.output_noise_rel) + cfg.oe.floor_margin_db
    } else {
        f64::NEG_INFINITY
    };
    let pts: Vec<(f64, f64)> = report
        .rows_for("oe_nk1")
        .filter(|r| r.is_ok() && r.relative_rmse_db > floor_db)
        .map(|r| (r.fs_hz, r.rmse))
        .collect();
    if cfg.fs_grid.len() > 1 {
        match fit_loglog_slope(&pts) {
            Ok(fit) => {
                let s = fit.slope_db_per_decade;
                report.checks.push(Check::new(
                    "delayed_model_slope",
                    (-95.0..=-60.0).contains(&s),
                    format!("{s:.2} dB/decade over {} points", pts.len()),
                ));
                report.slopes.push(NamedSlope {
                    label: "oe_nk1".into(),
                    fit,
                    points: pts.len(),
                });
            }
            Err(e) => report.checks.push(Check::new("delayed_model_slope", false, e.to_string())),
        }
    }
    let at = |model: &str, fs: f64| report.rows.iter().find(|r| r.model == model && r.fs_hz == fs && r.is_ok());
    if let (Some(a), Some(b)) = (at("oe_nk0", top), at("oe_nk1", top)) {
        let gap = (a.relative_rmse_db - b.relative_rmse_db).abs();
        report.checks.push(Check::new(
            "common_floor_at_highest_fs",
            gap <= 3.0,
            format!("nk0 {:.2} dB, nk1 {:.2} dB", a.relative_rmse_db, b.relative_rmse_db),
        ));
    }
    let low = cfg.fs_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    if let (Some(a), Some(b)) = (at("oe_nk0", low), at("oe_nk1", low)) {
        report.checks.push(Check::new(
            "delay_costs_accuracy_at_lowest_fs",
            b.rmse > a.rmse,
            format!("nk0 {:e}, nk1 {:e}", a.rmse, b.rmse),
        ));
    }
    Ok(report)
}

/// Plant and one period-aligned data set per realization at the virtual
/// rate, transient periods removed.
pub struct DuffingData {
    pub plant: DuffingPlant,
    pub realizations: Vec<(SampledSignal, SampledSignal)>,
}

pub fn duffing_data(cfg: &ExperimentConfig) -> Result<DuffingData> {
    let s = &cfg.pnlss;
    let rate = cfg.virtual_rate();
    let period = integer_ratio(rate, s.resolution_hz)?;
    let count = s.fit.realization_count;
    let periods = s.fit.periods_per_realization;
    let chain = SimChainConfig::new(cfg.generator.filter()?, 1);
    let excitation = |r: usize| -> Result<SampledSignal> {
        let mut spec = MultisineSpec::new(period, rate, s.band_hz, s.input_rms, cell_seed(cfg.seed, &[3, r as u64]));
        spec.periods = periods + s.transient_periods;
        gen_odd_multisine(&spec)
    };
    let plant = match &cfg.plant {
        Some(PlantSpec::Duffing { m, d, k1, k3 }) => DuffingPlant {
            m: *m,
            d: *d,
            k1: *k1,
            k3: *k3,
        },
        Some(PlantSpec::Lti { .. }) => return Err(invalid("nonlinear sweeps need a Duffing plant")),
        None => {
            let linear = DuffingPlant::linear_resonator(s.resonance_hz, s.damping_ratio);
            let pre = run_chain(&chain, &PlantKind::Duffing(linear), &excitation(0)?, rate)?;
            let y = pre.y.slice(s.transient_periods * period, periods * period)?;
            linear.with_cubic_fraction(y.rms(), s.cubic_fraction)
        }
    };
    plant.validate()?;
    let kind = PlantKind::Duffing(plant);
    let realizations = (0..count)
        .into_par_iter()
        .map(|r| {
            let out = run_chain(&chain, &kind, &excitation(r)?, rate)?;
            let cut = |x: &SampledSignal| -> Result<SampledSignal> {
                let body = x.slice(s.transient_periods * period, periods * period)?;
                SampledSignal::periodic(body.into_samples(), rate, period)
            };
            Ok((cut(&out.u)?, cut(&out.y)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DuffingData { plant, realizations })
}

struct PnlssCell {
    fit: Result<(PnlssModel, PnlssFitReport)>,
    /// Output aliasing error relative to the prefiltered output, held-out realization.
    aliasing_rel: Option<f64>,
}

fn pnlss_cell(cfg: &ExperimentConfig, data: &DuffingData, fs: f64, aliasing: bool) -> PnlssCell {
    let run = || -> Result<(Vec<SampledSignal>, Vec<SampledSignal>)> {
        let factor = integer_ratio(cfg.virtual_rate(), fs)?;
        let mut us = Vec::new();
        let mut ys = Vec::new();
        for (u, y) in &data.realizations {
            us.push(decimate_with(u, factor, Prefilter::None)?);
            ys.push(decimate_with(y, factor, Prefilter::None)?);
        }
        Ok((us, ys))
    };
    let fit = run().and_then(|(us, ys)| fit_pnlss(&us, &ys, &cfg.pnlss.fit));
    let aliasing_rel = if aliasing {
        integer_ratio(cfg.virtual_rate(), fs).ok().and_then(|factor| {
            let (_, y) = data.realizations.last()?;
            let clean = decimate_with(y, factor, Prefilter::Ideal).ok()?;
            let raw = decimate_with(y, factor, Prefilter::None).ok()?;
            let diff: Vec<f64> = clean.samples().iter().zip(raw.samples()).map(|(a, b)| a - b).collect();
            Some(rms(&diff) / rms(clean.samples()))
        })
    } else {
        None
    };
    PnlssCell { fit, aliasing_rel }
}

fn run_pnlss_family(cfg: &ExperimentConfig, jobs: usize, aliasing: bool) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(cfg);
    let data = duffing_data(cfg)?;
    if let Some((u, y)) = data.realizations.first() {
        report.spectra.push(("u_virtual".into(), power_spectrum(u, "rect")?));
        report.spectra.push(("y_virtual".into(), power_spectrum(y, "rect")?));
    }
    let cells = run_cells(&cfg.fs_grid, jobs, |&fs| pnlss_cell(cfg, &data, fs, aliasing))?;
    let mut validation_db = Vec::new();
    for (&fs, cell) in cfg.fs_grid.iter().zip(cells) {
        match cell.fit {
            Ok((model, fr)) => {
                let mut train = ReportRow::new(fs, "pnlss_train");
                train.rmse = fr.train.rmse;
                train.relative_rmse_db = fr.train.relative_rmse_db();
                train.iterations = Some(fr.train.iterations);
                train.converged = Some(fr.train.converged);
                report.rows.push(train.clone());
                let mut lin = ReportRow::new(fs, "linear_train");
                lin.relative_rmse_db = db(fr.linear_train_relative);
                lin.rmse = f64::NAN;
                report.rows.push(lin);
                match fr.validation {
                    Some(v) => {
                        let mut row = ReportRow::new(fs, "pnlss_validation");
                        row.rmse = v.rms;
                        row.relative_rmse_db = db(v.relative);
                        report.rows.push(row);
                        validation_db.push((fs, db(v.relative)));
                        report.checks.push(Check::new(
                            format!("generalization_gap_fs{fs}"),
                            train.relative_rmse_db <= db(v.relative) + 6.0,
                            format!("train {:.2} dB, validation {:.2} dB", train.relative_rmse_db, db(v.relative)),
                        ));
                        if let Some(a) = cell.aliasing_rel {
                            let mut row = ReportRow::new(fs, "aliasing");
                            row.relative_rmse_db = db(a);
                            row.rmse = a;
                            let margin = db(v.relative) - db(a);
                            row.margin_db = Some(margin);
                            report.rows.push(row);
                            report.checks.push(Check::new(
                                format!("aliasing_margin_fs{fs}"),
                                margin >= 20.0,
                                format!("model {:.2} dB, aliasing {:.2} dB", db(v.relative), db(a)),
                            ));
                        }
                    }
                    None => report.checks.push(Check::new(
                        format!("validation_skipped_fs{fs}"),
                        true,
                        "single realization: nothing held out",
                    )),
                }
                report
                    .models
                    .push((format!("pnlss_fs{fs}"), model.to_json()?));
            }
            Err(e) => report.rows.push(ReportRow::failed(fs, "pnlss_train", &e)),
        }
    }
    validation_db.sort_by(|a, b| a.0.total_cmp(&b.0));
    if validation_db.len() >= 2 {
        let (f0, e0) = validation_db[0];
        let (f1, e1) = validation_db[1];
        report.checks.push(Check::new(
            "validation_improves_with_fs",
            e1 <= e0 - 10.0,
            format!("{f0} Hz: {e0:.2} dB, {f1} Hz: {e1:.2} dB"),
        ));
    }
    Ok(report)
}

pub fn run_pnlss_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    run_pnlss_family(cfg, jobs, false)
}

pub fn run_aliasing_study(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    run_pnlss_family(cfg, jobs, true)
}

/// Output aliasing error of plain sample omission against a brick-wall
/// prefilter, relative to the prefiltered record.
pub fn aliasing_error(y: &SampledSignal, factor: usize) -> Result<f64> {
    let clean = decimate_with(y, factor, Prefilter::Ideal)?;
    let raw = decimate_with(y, factor, Prefilter::None)?;
    let diff: Vec<f64> = clean.samples().iter().zip(raw.samples()).map(|(a, b)| a - b).collect();
    let reference = rms(clean.samples());
    if reference == 0.0 {
        return Err(Error::UndefinedRelative);
    }
    Ok(rms(&diff) / reference)
}
