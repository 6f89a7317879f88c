//! Command-line front end.
//!
//! Exit status: 0 on success, 1 for bad arguments or unreadable inputs,
//! 2 when a computation fails. Data goes to files or stdout, messages to
//! stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bounds::{bound_table, BoundRow};
use crate::error::{Error, Result};
use crate::harness::{band_limited_record, run_experiment, ExperimentConfig};
use crate::plant_sim::{run_chain, GeneratorSpec, PlantConfig};
use crate::signals::{gen_odd_multisine, gen_white_noise, MultisineSpec, SampledSignal};
use crate::sysid_linear::{fit_ar_predictor, fit_oe, FitReport};
use crate::sysid_pnlss::{fit_pnlss, PnlssFitConfig};

#[derive(Debug, Parser)]
#[command(name = "recursim", version, about = "Recursive discrete-time models of band-limited measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write an excitation signal as CSV.
    Generate(GenerateArgs),
    /// Drive a plant through the generator chain.
    Simulate(SimulateArgs),
    /// Fit a model to measured records.
    Identify(IdentifyArgs),
    /// Tabulate the closed-form error bounds over an fs grid.
    Bounds(BoundsArgs),
    /// Run an experiment sweep and write its report directory.
    Sweep(SweepArgs),
    /// Print the checks of an existing report directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignalKind {
    Noise,
    Multisine,
    BandLimited,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(value_enum)]
    kind: SignalKind,
    #[arg(long)]
    fs: f64,
    /// Number of samples (noise, band-limited) or samples per period (multisine).
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RMS value (noise standard deviation for `noise`).
    #[arg(long, default_value_t = 1.0)]
    rms: f64,
    /// Multisine band as `lo:hi` in Hz.
    #[arg(long, default_value = "0:100")]
    band: String,
    #[arg(long, default_value_t = 1)]
    periods: usize,
    /// Generator filter order (band-limited).
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Generator cut-off in Hz (band-limited).
    #[arg(long, default_value_t = 100.0)]
    fc: f64,
    #[arg(long, default_value_t = 32)]
    oversample: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Plant JSON with generator filter and oversampling.
    #[arg(long)]
    plant: PathBuf,
    /// Excitation CSV.
    #[arg(long)]
    input: PathBuf,
    /// Excitation sampling rate, when the CSV has no time column.
    #[arg(long)]
    input_fs: Option<f64>,
    #[arg(long)]
    fs_target: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_y: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_u: PathBuf,
    #[arg(long)]
    out_y: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Ar,
    Oe,
    Pnlss,
}

#[derive(Debug, Args)]
struct IdentifyArgs {
    #[arg(value_enum)]
    model: ModelKind,
    /// Input CSV; comma-separate several files for multiple realizations.
    #[arg(long, value_delimiter = ',', required = true)]
    input: Vec<PathBuf>,
    /// Output CSV, matching `--input` one to one.
    #[arg(long, value_delimiter = ',')]
    output: Vec<PathBuf>,
    #[arg(long)]
    fs: Option<f64>,
    /// Predictor order (ar).
    #[arg(long, default_value_t = 10)]
    order: usize,
    #[arg(long, default_value_t = 2)]
    nb: usize,
    #[arg(long, default_value_t = 2)]
    nf: usize,
    #[arg(long, default_value_t = 0)]
    nk: usize,
    #[arg(long, default_value_t = 2)]
    na: usize,
    #[arg(long, default_value_t = 3)]
    degree: u32,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Period length in samples, for periodic records (pnlss).
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    force_direct_zero: bool,
    /// Model JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoundsArgs {
    #[arg(long)]
    fc: f64,
    #[arg(long)]
    n: u32,
    /// `start:stop:count`.
    #[arg(long)]
    fs_grid: String,
    /// Space the grid logarithmically.
    #[arg(long)]
    log: bool,
    /// Direct term of the plant in 1/s.
    #[arg(long, default_value_t = 2.0 * std::f64::consts::PI * 1000.0)]
    g0: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) | Error::Parse(m) => Failure::Usage(m),
            Error::Io { .. } | Error::Json { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `start:stop:count`.
pub fn parse_grid(text: &str, log: bool) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Parse(format!("grid must be start:stop:count, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    if log && !(start > 0.0 && stop > 0.0) {
        return Err(Error::Parse("logarithmic grid needs positive ends".into()));
    }
    Ok((0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            if log {
                10f64.powf(start.log10() + t * (stop.log10() - start.log10()))
            } else {
                start + t * (stop - start)
            }
        })
        .collect())
}

fn parse_band(text: &str) -> Result<(f64, f64)> {
    let bad = || Error::Parse(format!("band must be lo:hi, got {text:?}"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file", path.display())))
    }
}

fn write_signal(sig: &SampledSignal, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    match out {
        Some(p) => sig.save_csv(p)?,
        None => sig.write_csv(&mut *stdout).map_err(|e| Error::io("stdout", e))?,
    }
    Ok(())
}

fn generate(a: GenerateArgs, stdout: &mut dyn Write) -> CmdResult {
    let sig = match a.kind {
        SignalKind::Noise => gen_white_noise(a.seed, a.len, a.rms, a.fs)?,
        SignalKind::Multisine => {
            let mut spec = MultisineSpec::new(a.len, a.fs, parse_band(&a.band)?, a.rms, a.seed);
            spec.periods = a.periods;
            gen_odd_multisine(&spec)?
        }
        SignalKind::BandLimited => {
            let gen = GeneratorSpec {
                order: a.order,
                fc_hz: a.fc,
            }
            .filter()?;
            let unit = band_limited_record(&gen, a.fs, a.oversample, a.len, a.seed)?;
            let scaled = unit.samples().iter().map(|v| v * a.rms).collect();
            unit.with_samples(scaled)?
        }
    };
    write_signal(&sig, a.out.as_deref(), stdout)
}

fn simulate(a: SimulateArgs) -> CmdResult {
    require_file(&a.plant)?;
    require_file(&a.input)?;
    let pc = PlantConfig::load(&a.plant)?;
    let excitation = SampledSignal::load_csv(&a.input, a.input_fs)?;
    let mut chain = pc.chain()?;
    chain.noise_y_std = a.noise_y;
    chain.noise_seed = a.seed;
    let out = run_chain(&chain, &pc.plant.build()?, &excitation, a.fs_target)?;
    out.u.save_csv(&a.out_u)?;
    out.y.save_csv(&a.out_y)?;
    Ok(())
}

fn load_all(paths: &[PathBuf], fs: Option<f64>, period: Option<usize>) -> std::result::Result<Vec<SampledSignal>, Failure> {
    paths
        .iter()
        .map(|p| {
            require_file(p)?;
            let s = SampledSignal::load_csv(p, fs)?;
            Ok(match period {
                Some(n) => SampledSignal::periodic(s.samples().to_vec(), s.fs(), n)?,
                None => s,
            })
        })
        .collect()
}

fn save_json(path: Option<&Path>, text: &str) -> CmdResult {
    if let Some(p) = path {
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn identify(a: IdentifyArgs, stdout: &mut dyn Write) -> CmdResult {
    let us = load_all(&a.input, a.fs, a.period)?;
    let out_err = |e: std::io::Error| Error::io("stdout", e);
    match a.model {
        ModelKind::Ar => {
            let m = fit_ar_predictor(&us[0], a.order)?;
            writeln!(stdout, "order,fit_rmse_v\n{},{}", m.order, m.fit_rmse).map_err(out_err)?;
            save_json(a.out.as_deref(), &serde_json::to_string_pretty(&m).map_err(|e| Error::json("model", e))?)
        }
        ModelKind::Oe => {
            if a.output.len() != 1 || us.len() != 1 {
                return Err(Failure::Usage("oe needs exactly one --input and one --output".into()));
            }
            let ys = load_all(&a.output, a.fs, a.period)?;
            let (m, report) = fit_oe(&us[0], &ys[0], a.nb, a.nf, a.nk)?;
            writeln!(stdout, "{}\n{}", FitReport::CSV_HEADER, report.csv_row(us[0].fs(), a.nk)).map_err(out_err)?;
            save_json(a.out.as_deref(), &serde_json::to_string_pretty(&m).map_err(|e| Error::json("model", e))?)
        }
        ModelKind::Pnlss => {
            if a.output.len() != us.len() {
                return Err(Failure::Usage("--output must list one file per --input".into()));
            }
            let ys = load_all(&a.output, a.fs, a.period)?;
            let cfg = PnlssFitConfig {
                na: a.na,
                degree: a.degree,
                max_iters: a.max_iters,
                realization_count: us.len(),
                force_direct_zero: a.force_direct_zero,
                ..Default::default()
            };
            let (m, r) = fit_pnlss(&us, &ys, &cfg)?;
            let val = r.validation.map(|v| v.relative_db().to_string()).unwrap_or_default();
            writeln!(
                stdout,
                "train_rmse_v,train_relative_db,validation_relative_db,iterations,converged\n{},{},{},{},{}",
                r.train.rmse,
                r.train.relative_rmse_db(),
                val,
                r.train.iterations,
                r.train.converged
            )
            .map_err(out_err)?;
            save_json(a.out.as_deref(), &m.to_json()?)
        }
    }
}

fn bounds(a: BoundsArgs, stdout: &mut dyn Write) -> CmdResult {
    let grid = parse_grid(&a.fs_grid, a.log)?;
    let rows = bound_table(a.fc, a.n, a.g0, &grid)?;
    let mut text = format!("{}\n", BoundRow::CSV_HEADER);
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

fn sweep(a: SweepArgs, stderr: &mut dyn Write) -> CmdResult {
    require_file(&a.config)?;
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let report = run_experiment(&cfg, a.jobs)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("run_{}", cfg.hash())));
    report.write(&out)?;
    let _ = writeln!(
        stderr,
        "{}: {} rows, {} checks, all passed: {} -> {}",
        cfg.experiment.name(),
        report.rows.len(),
        report.checks.len(),
        report.all_passed(),
        out.display()
    );
    Ok(())
}

fn report(a: ReportArgs, stdout: &mut dyn Write) -> CmdResult {
    let path = a.dir.join("report.json");
    require_file(&path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut out = String::from("check,passed,detail\n");
    for c in v["checks"].as_array().into_iter().flatten() {
        out.push_str(&format!(
            "{},{},{}\n",
            c["name"].as_str().unwrap_or_default(),
            c["passed"].as_bool().unwrap_or(false),
            c["detail"].as_str().unwrap_or_default().replace(',', ";")
        ));
    }
    stdout.write_all(out.as_bytes()).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

/// Runs one invocation, writing to the given streams; returns the exit status.
pub fn dispatch_to<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a, stdout),
        Command::Simulate(a) => simulate(a),
        Command::Identify(a) => identify(a, stdout),
        Command::Bounds(a) => bounds(a, stdout),
        Command::Sweep(a) => sweep(a, stderr),
        Command::Report(a) => report(a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(stderr, "error: {m}\n\nRun with --help for usage.");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(args, &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = dispatch_to(std::iter::once("recursim").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1:3:3", false).unwrap(), vec![1.0, 2.0, 3.0]);
        let g = parse_grid("1e3:1e5:3", true).unwrap();
        assert!((g[1] - 1e4).abs() < 1e-9);
        assert!(parse_grid("1:2", false).is_err());
        assert!(parse_grid("0:10:3", true).is_err());
        assert!(parse_grid("a:2:3", false).is_err());
    }

    #[test]
    fn bounds_table_on_stdout() {
        let (code, out, _) = run(&["bounds", "--fc", "100", "--n", "4", "--fs-grid", "1e3:1e5:10"]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "fs_hz,pu_eps_v2,py_eps_v2,rmse_bound_v");
        assert_eq!(lines.len(), 11);
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run(&["bounds", "--fc", "100"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
        assert_eq!(run(&["nonsense"]).0, 1);
        assert_eq!(run(&["bounds", "--fc", "100", "--n", "4", "--fs-grid", "1e3:1e5:10", "--bogus"]).0, 1);
        let (code, _, err) = run(&["sweep", "--config", "missing.json"]);
        assert_eq!(code, 1);
        assert!(err.contains("missing.json"));
        assert_eq!(run(&["--help"]).0, 0);
    }

    #[test]
    fn bounds_reject_undersampled_grid() {
        let (code, out, err) = run(&["bounds", "--fc", "100", "--n", "4", "--fs-grid", "100:1000:3"]);
        assert_eq!(code, 1);
        assert!(out.is_empty());
        assert!(err.contains("must exceed"));
    }
}
