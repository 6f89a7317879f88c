//! Randomized invariants.

use proptest::prelude::*;
use recursim::bounds::{fit_loglog_slope, rmse_bound_exponent, unexplained_power};
use recursim::harness::cell_seed;
use recursim::metrics::error_metrics;
use recursim::plant_sim::{butterworth_lowpass, direct_term_ratio, LtiPlant};
use recursim::signals::{decimate_with, dft, gen_odd_multisine, gen_white_noise, MultisineSpec, Prefilter, SampledSignal};
use recursim::sysid_linear::{simulate_oe, OeModel};
use recursim::sysid_pnlss::{eval_monomials, MonomialBasis, PnlssModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_offsets(
        ys in prop::collection::vec(-10.0f64..10.0, 8..64),
        noise in prop::collection::vec(-0.5f64..0.5, 64),
        a in -1e3f64..1e3,
        b in -1e3f64..1e3,
    ) {
        let m: Vec<f64> = ys.iter().zip(&noise).map(|(y, e)| y + e).collect();
        if let Ok(base) = error_metrics(&ys, &m) {
            let ys2: Vec<f64> = ys.iter().map(|v| v + a).collect();
            let m2: Vec<f64> = m.iter().map(|v| v + b).collect();
            let moved = error_metrics(&ys2, &m2).unwrap();
            prop_assert!((moved.rms - base.rms).abs() <= 1e-9 * (1.0 + base.rms));
            prop_assert!(base.rms >= 0.0 && base.relative >= 0.0);
        }
    }

    #[test]
    fn metrics_of_exact_model_are_zero(ys in prop::collection::vec(-5.0f64..5.0, 2..50)) {
        if let Ok(m) = error_metrics(&ys, &ys) {
            prop_assert_eq!(m.rms, 0.0);
        }
    }

    #[test]
    fn unexplained_power_falls_with_fs(fc in 1.0f64..1e3, ratio in 2.5f64..100.0, n in 1u32..6) {
        let lo = unexplained_power(fc, ratio * fc, n).unwrap();
        let hi = unexplained_power(fc, 2.0 * ratio * fc, n).unwrap();
        prop_assert!(hi < lo);
        let expected = 2f64.powi(-(2 * n as i32 - 1));
        prop_assert!((hi / lo / expected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn slope_of_power_law_is_recovered(k in -6.0f64..6.0, c in 1e-6f64..1e6, f0 in 1.0f64..1e4) {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| {
            let f = f0 * 10f64.powf(i as f64 / 4.0);
            (f, c * f.powf(k))
        }).collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        prop_assert!((fit.slope_db_per_decade - 20.0 * k).abs() < 1e-8);
    }

    #[test]
    fn bound_exponent_is_linear_in_order(n in 1u32..20) {
        let step = rmse_bound_exponent(n + 1).unwrap() - rmse_bound_exponent(n).unwrap();
        prop_assert!((step + 20.0).abs() < 1e-12);
    }

    #[test]
    fn multisine_has_only_odd_lines(exp in 6u32..11, seed in any::<u64>(), hi_frac in 0.05f64..0.45) {
        let n = 1usize << exp;
        let fs = n as f64;
        let spec = MultisineSpec::new(n, fs, (0.0, hi_frac * fs), 1.0, seed);
        let u = gen_odd_multisine(&spec).unwrap();
        let spectrum = dft(u.samples());
        let peak = spectrum.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for k in (0..n).step_by(2) {
            prop_assert!(spectrum[k].norm() <= 1e-10 * peak);
        }
        prop_assert!((u.rms() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noise_is_seed_determined(seed in any::<u64>(), n in 1usize..200) {
        let a = gen_white_noise(seed, n, 1.0, 10.0).unwrap();
        let b = gen_white_noise(seed, n, 1.0, 10.0).unwrap();
        prop_assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn cell_seeds_separate_coordinates(root in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        prop_assume!(i != j);
        prop_assert_ne!(cell_seed(root, &[i]), cell_seed(root, &[j]));
        prop_assert_eq!(cell_seed(root, &[i, j]), cell_seed(root, &[i, j]));
    }

    #[test]
    fn plain_decimation_keeps_every_rth_sample(xs in prop::collection::vec(-1.0f64..1.0, 1..20), r in 1usize..6) {
        let mut data = Vec::new();
        for _ in 0..r {
            data.extend_from_slice(&xs);
        }
        let s = SampledSignal::new(data.clone(), 100.0).unwrap();
        let d = decimate_with(&s, r, Prefilter::None).unwrap();
        prop_assert_eq!(d.len(), xs.len());
        prop_assert!((d.fs() - 100.0 / r as f64).abs() < 1e-12);
        for (k, v) in d.samples().iter().enumerate() {
            prop_assert_eq!(*v, data[k * r]);
        }
    }

    #[test]
    fn oe_simulation_is_linear(
        u1 in prop::collection::vec(-1.0f64..1.0, 30),
        u2 in prop::collection::vec(-1.0f64..1.0, 30),
        alpha in -3.0f64..3.0,
        pole in -0.9f64..0.9,
    ) {
        let m = OeModel::new(vec![0.5, -0.2], vec![1.0, -pole], 1).unwrap();
        let sim = |u: &[f64]| simulate_oe(&m, &SampledSignal::new(u.to_vec(), 1.0).unwrap()).unwrap().into_samples();
        let mix: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + alpha * b).collect();
        let (y1, y2, ym) = (sim(&u1), sim(&u2), sim(&mix));
        prop_assert!(ym[0] == 0.0);
        for t in 0..30 {
            prop_assert!((ym[t] - y1[t] - alpha * y2[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn monomials_are_homogeneous(
        x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, u in -2.0f64..2.0,
        s in 0.1f64..3.0, degree in 2u32..5,
    ) {
        let basis = MonomialBasis::new(2, degree).unwrap();
        let v = eval_monomials(&basis, &[x0, x1], u);
        let w = eval_monomials(&basis, &[s * x0, s * x1], s * u);
        for (k, e) in basis.exponents.iter().enumerate() {
            let deg: u32 = e.iter().sum();
            prop_assert!((2..=degree).contains(&deg));
            let expected = v[k] * s.powi(deg as i32);
            prop_assert!((w[k] - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn pnlss_json_round_trip(a in -0.9f64..0.9, b in -5.0f64..5.0, c in -5.0f64..5.0, d in -5.0f64..5.0, e in -1.0f64..1.0) {
        use nalgebra::{DMatrix, DVector};
        let basis = MonomialBasis::new(1, 3).unwrap();
        let mut m = PnlssModel::from_linear(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, b),
            DVector::from_element(1, c),
            d,
            basis.clone(),
            basis,
        ).unwrap();
        m.e.fill(e);
        m.f.fill(-e);
        let back = PnlssModel::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn butterworth_is_3db_at_cutoff(order in 1usize..8, fc in 1.0f64..1e4) {
        let p = butterworth_lowpass(order, fc).unwrap();
        prop_assert!((p.magnitude(fc) - 0.5f64.sqrt()).abs() < 1e-9);
        prop_assert!((p.dc_gain() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_degree_two_has_no_direct_term(w in 10.0f64..1e3, zeta in 0.05f64..2.0, fs_mult in 10.0f64..100.0) {
        let p = LtiPlant::new(vec![w * w], vec![w * w, 2.0 * zeta * w, 1.0]).unwrap();
        prop_assert_eq!(direct_term_ratio(&p, fs_mult * w).unwrap(), 0.0);
    }
}
