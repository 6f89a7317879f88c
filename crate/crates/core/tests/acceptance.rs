//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use recursim::bounds::fit_loglog_slope;
use recursim::harness::{power_law_exponent, run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport};
use recursim::metrics::error_metrics;
use recursim::plant_sim::{
    direct_term_ratio, duffing_rk4, impulse_invariant, simulate_duffing, simulate_lti, DuffingPlant, LtiPlant,
};
use recursim::signals::{dft, gen_odd_multisine, MultisineSpec, SampledSignal};
use recursim::sysid_pnlss::{output_jacobian, simulate_pnlss, MonomialBasis, PnlssModel};

/// Written straight to stderr so the line shows without `--nocapture`.
fn verdict(id: u32, passed: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {id}: {} ({detail}; {:.1} s)\n",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn db(ratio: f64) -> f64 {
    20.0 * ratio.log10()
}

#[test]
fn criterion_1_prediction_power_law() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut passed = true;
    for n in [2usize, 4] {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::PredictionSweep);
        cfg.generator.order = n;
        cfg.generator.fc_hz = 100.0;
        cfg.bandwidth_grid = vec![100.0];
        cfg.fs_grid = (0..7).map(|k| 2000.0 * 10f64.powf(k as f64 / 6.0)).collect();
        cfg.ar_orders = vec![40];
        cfg.record_len = 1 << 15;
        let rep = run_experiment(&cfg, 0).unwrap();
        assert_eq!(rep.slopes.len(), 1, "one slope per order");
        let exponent = power_law_exponent(&rep.slopes[0].fit);
        let target = (2 * n - 1) as f64;
        let ok = (exponent - target).abs() <= 0.2 * target;
        passed &= ok;
        details.push(format!("n={n}: exponent {exponent:.3} vs {target}"));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(120);
    verdict(1, passed, &details.join(", "), elapsed);
    assert!(passed, "{details:?}");
}

fn oe_report() -> (ExperimentReport, Duration) {
    let start = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::OeSweep);
    let rep = run_experiment(&cfg, 0).unwrap();
    (rep, start.elapsed())
}

#[test]
fn criteria_2_3_oe_slope_and_floor() {
    let (rep, elapsed) = oe_report();

    let slope = rep.slope("oe_nk1").expect("delayed-model slope");
    let s = slope.fit.slope_db_per_decade;
    let ok2 = (-95.0..=-60.0).contains(&s) && elapsed < Duration::from_secs(300);
    verdict(
        2,
        ok2,
        &format!("nk=1 slope {s:.2} dB/decade over {} points, r2 {:.4}", slope.points, slope.fit.r_squared),
        elapsed,
    );

    let top = rep.rows.iter().map(|r| r.fs_hz).fold(f64::NEG_INFINITY, f64::max);
    let at_top = |model: &str| rep.rows_for(model).find(|r| r.fs_hz == top).map(|r| r.rmse);
    let (a, b) = (at_top("oe_nk0").unwrap(), at_top("oe_nk1").unwrap());
    let gap = (db(a) - db(b)).abs();
    let ok3 = gap <= 3.0;
    verdict(3, ok3, &format!("fs {top} Hz: nk0 {:.2} dB, nk1 {:.2} dB", db(a), db(b)), elapsed);

    assert!(ok2, "slope {s}");
    assert!(ok3, "gap {gap} dB");
}

#[test]
fn criterion_4_direct_term_decay() {
    let start = Instant::now();
    let exact = LtiPlant::new(vec![5.0], vec![2.0, 3.0, 1.0]).unwrap();
    let g = impulse_invariant(&exact, 1000.0, 16).unwrap();
    let exact_zero = g[0] == 0.0 && g[1] != 0.0;

    // Resonance at 40 Hz with a weak derivative path in the numerator.
    let w = 2.0 * std::f64::consts::PI * 40.0;
    let near = LtiPlant::new(vec![w * w, 0.01 * w], vec![w * w, 0.6 * w, 1.0]).unwrap();
    let ratios: Vec<f64> = [125.0, 250.0, 500.0, 1000.0]
        .iter()
        .map(|&fs| direct_term_ratio(&near, fs).unwrap())
        .collect();
    let decreasing = ratios.windows(2).all(|p| p[1] < p[0]);
    let passed = exact_zero && decreasing;
    verdict(
        4,
        passed,
        &format!("degree-2 g(0) = {:e}; ratios over 125..1000 Hz {ratios:.5?}", g[0]),
        start.elapsed(),
    );
    assert!(passed);
}

#[test]
fn criteria_5_6_pnlss_improvement_and_aliasing() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default_for(ExperimentKind::AliasingStudy);
    let rep = run_experiment(&cfg, 0).unwrap();
    let elapsed = start.elapsed();

    let validation = |fs: f64| {
        rep.rows_for("pnlss_validation")
            .find(|r| r.fs_hz == fs)
            .map(|r| r.relative_rmse_db)
    };
    let (v200, v400) = (validation(200.0), validation(400.0));
    let ok5 = matches!((v200, v400), (Some(a), Some(b)) if b <= a - 10.0) && elapsed < Duration::from_secs(600);
    verdict(5, ok5, &format!("validation 200 Hz {v200:.2?} dB, 400 Hz {v400:.2?} dB"), elapsed);

    let mut margins = Vec::new();
    let mut ok6 = true;
    for &fs in &cfg.fs_grid {
        match rep.rows_for("aliasing").find(|r| r.fs_hz == fs).and_then(|r| r.margin_db) {
            Some(m) => {
                ok6 &= m >= 20.0;
                margins.push(format!("{fs} Hz {m:.1} dB"));
            }
            None => {
                ok6 = false;
                margins.push(format!("{fs} Hz missing"));
            }
        }
    }
    verdict(6, ok6, &format!("margins {}", margins.join(", ")), elapsed);

    assert!(ok5, "{v200:?} -> {v400:?}");
    assert!(ok6, "{margins:?}");
}

fn jacobian_error() -> f64 {
    let basis = MonomialBasis::new(2, 3).unwrap();
    let mut m = PnlssModel::from_linear(
        DMatrix::from_row_slice(2, 2, &[0.6, 0.3, -0.3, 0.6]),
        DVector::from_vec(vec![1.0, 0.5]),
        DVector::from_vec(vec![1.0, -0.4]),
        0.2,
        basis.clone(),
        basis,
    )
    .unwrap();
    m.e = DMatrix::from_fn(2, m.basis_state.len(), |i, k| 0.02 * ((i * 7 + k * 3) % 5) as f64 - 0.04);
    m.f = DVector::from_fn(m.basis_out.len(), |k, _| 0.03 * ((k * 5) % 7) as f64 / 7.0 - 0.01);
    let spec = MultisineSpec::new(64, 1.0, (0.0, 0.3), 0.5, 11);
    let u = gen_odd_multisine(&MultisineSpec { periods: 2, ..spec }).unwrap();
    let (_, jac) = output_jacobian(&m, &u).unwrap();
    let p = m.params();
    let mut worst: f64 = 0.0;
    let scale = jac.abs().max();
    for j in 0..p.len() {
        let h = 1e-6 * p[j].abs().max(1.0);
        let run = |delta: f64| {
            let mut q = p.clone();
            q[j] += delta;
            simulate_pnlss(&m.with_params(&q).unwrap(), &u, &[0.0, 0.0]).unwrap().into_samples()
        };
        let (yp, ym) = (run(h), run(-h));
        for t in 0..u.len() {
            let fd = (yp[t] - ym[t]) / (2.0 * h);
            worst = worst.max((fd - jac[(t, j)]).abs());
        }
    }
    worst / scale
}

/// Observed order of RK4 on a forced nonlinear oscillator, from errors at
/// successive step halvings against a fine reference.
fn rk4_order() -> f64 {
    let plant = DuffingPlant {
        m: 1.0,
        d: 0.4,
        k1: 40.0,
        k3: 5.0,
    };
    let forcing = |t: f64| (3.0 * t).sin() + 0.5 * (7.0 * t).cos();
    let horizon = 2.0;
    let end = |n: usize| duffing_rk4(&plant, forcing, horizon / n as f64, n, (0.1, 0.0))[n].0;
    let reference = end(1 << 14);
    let errors: Vec<f64> = [50usize, 100, 200].iter().map(|&n| (end(n) - reference).abs()).collect();
    let orders: Vec<f64> = errors.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    orders.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn duffing_linear_limit_error() -> f64 {
    let linear = DuffingPlant::linear_resonator(70.0, 0.05);
    let spec = MultisineSpec::new(6400, 6400.0, (0.0, 100.0), 1.0, 5);
    let u = gen_odd_multisine(&MultisineSpec { periods: 3, ..spec }).unwrap();
    let y_lin = simulate_lti(&linear.linearized().unwrap(), &u).unwrap();
    let y_rms = y_lin.rms();
    let weak = linear.with_cubic_fraction(y_rms, 1e-9);
    let y_duff = simulate_duffing(&weak, &u).unwrap();
    error_metrics(y_lin.samples(), y_duff.samples()).unwrap().relative
}

fn offset_immunity() -> bool {
    let y: Vec<f64> = (0..500).map(|k| (k as f64 * 0.13).sin() + 0.1 * (k as f64 * 0.71).cos()).collect();
    let m: Vec<f64> = y.iter().enumerate().map(|(k, v)| v + 0.01 * (k as f64 * 0.37).sin()).collect();
    let base = error_metrics(&y, &m).unwrap();
    let shifted_y: Vec<f64> = y.iter().map(|v| v + 3.5).collect();
    let shifted_m: Vec<f64> = m.iter().map(|v| v - 12.0).collect();
    let moved = error_metrics(&shifted_y, &shifted_m).unwrap();
    (moved.rms - base.rms).abs() <= 1e-12 * base.rms && (moved.relative - base.relative).abs() <= 1e-12 * base.relative
}

fn even_bin_leakage() -> f64 {
    let spec = MultisineSpec::new(4096, 4096.0, (0.0, 1500.0), 1.0, 21);
    let u = gen_odd_multisine(&spec).unwrap();
    let spectrum = dft(u.samples());
    let peak = spectrum.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let even = (0..spectrum.len()).step_by(2).map(|k| spectrum[k].norm()).fold(0.0, f64::max);
    even / peak
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reruns_identical() -> bool {
    let mut cfg = ExperimentConfig::default_for(ExperimentKind::PredictionSweep);
    cfg.fs_grid = vec![2000.0, 5000.0, 10000.0, 20000.0];
    cfg.bandwidth_grid = vec![100.0];
    cfg.ar_orders = vec![2, 10];
    cfg.record_len = 4096;
    cfg.seed = 42;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, 0).unwrap().write(a.path()).unwrap();
    run_experiment(&cfg, 1).unwrap().write(b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    !fa.is_empty() && fa == fb
}

#[test]
fn criterion_7_property_suites() {
    let start = Instant::now();
    let jac = jacobian_error();
    let order = rk4_order();
    let linear_limit = duffing_linear_limit_error();
    let offsets = offset_immunity();
    let leakage = even_bin_leakage();
    let identical = reruns_identical();
    let parts = [
        (jac < 1e-5, format!("jacobian rel err {jac:.2e}")),
        (order >= 3.5, format!("rk4 order {order:.2}")),
        (linear_limit < 1e-4, format!("duffing linear limit {linear_limit:.2e}")),
        (offsets, format!("offset immunity {offsets}")),
        (leakage < 1e-10, format!("even-bin leakage {leakage:.2e}")),
        (identical, format!("identical reruns {identical}")),
    ];
    let passed = parts.iter().all(|p| p.0);
    let detail: Vec<&str> = parts.iter().map(|p| p.1.as_str()).collect();
    verdict(7, passed, &detail.join(", "), start.elapsed());
    assert!(passed, "{detail:?}");
}

#[test]
fn slope_fit_agrees_with_exponent_definition() {
    // An exact fs^-7 power law must read back as exponent 7.
    let pts: Vec<(f64, f64)> = [1e3f64, 2e3, 5e3, 1e4].iter().map(|&f| (f, f.powf(-3.5))).collect();
    let fit = fit_loglog_slope(&pts).unwrap();
    assert!((power_law_exponent(&fit) - 7.0).abs() < 1e-9);
}

#[test]
fn seeded_signal_is_reproducible() {
    let spec = MultisineSpec::new(256, 256.0, (0.0, 60.0), 1.0, 9);
    let a = gen_odd_multisine(&spec).unwrap();
    let b = gen_odd_multisine(&spec).unwrap();
    assert_eq!(a.samples(), b.samples());
    let s = SampledSignal::new(a.samples().to_vec(), 256.0).unwrap();
    assert_eq!(s.len(), 256);
}
