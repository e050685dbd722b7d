//! Property-based invariants: transform roundtrips, linearity, energy
//! conservation, split hygiene, augmentation equivalence, and parallel/
//! sequential agreement, across randomized inputs rather than fixtures.

use proptest::prelude::*;

use refocus_core::data::{chronological_split, standardize, windows_lenient, Dataset};
use refocus_core::fft::{irfft, rfft};
use refocus_core::par::map_range;
use refocus_core::revin::{revin_denormalize, revin_normalize, verify_revin_theorem};
use refocus_core::rng::derive_rng;
use refocus_core::training::{ket_mix, verify_ket_equivalence};
use refocus_core::{ameo, Tensor};

/// Finite signal with entries in ±10 and length in [n_lo, n_hi].
fn signal(n_lo: usize, n_hi: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n_lo..=n_hi)
}

/// Signal with enough spread for scale-sensitive checks: sample standard
/// deviation above 1e-3.
fn spread_signal(n_lo: usize, n_hi: usize) -> impl Strategy<Value = Vec<f64>> {
    signal(n_lo, n_hi).prop_filter("needs spread", |x| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
        var.sqrt() > 1e-3
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // -- FFT ---------------------------------------------------------------

    #[test]
    fn fft_roundtrip_recovers_the_signal(x in signal(2, 64)) {
        let n = x.len();
        let back = irfft(&rfft(&x), n);
        let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn fft_is_linear(
        x in signal(8, 32),
        y in signal(8, 32),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let n = x.len().min(y.len());
        let x = &x[..n];
        let y = &y[..n];
        let mixed: Vec<f64> = x.iter().zip(y).map(|(&u, &v)| a * u + b * v).collect();
        let fx = rfft(x);
        let fy = rfft(y);
        let fm = rfft(&mixed);
        for (i, z) in fm.iter().enumerate() {
            let expect = a * fx[i] + b * fy[i];
            prop_assert!((z - expect).norm() <= 1e-9 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn fft_conserves_energy(x in signal(2, 64)) {
        // Parseval with the unnormalized forward transform:
        // Σ x² = (1/n)·Σ_full |X(f)|², reconstructing the full spectrum
        // from the half spectrum by conjugate symmetry.
        let n = x.len();
        let hf = rfft(&x);
        let time: f64 = x.iter().map(|v| v * v).sum();
        let mut freq = 0.0;
        for (f, z) in hf.iter().enumerate() {
            let edge = f == 0 || (n % 2 == 0 && f == n / 2);
            freq += if edge { z.norm_sqr() } else { 2.0 * z.norm_sqr() };
        }
        freq /= n as f64;
        prop_assert!((time - freq).abs() <= 1e-9 * (1.0 + time.abs()));
    }

    // -- RevIN -------------------------------------------------------------

    #[test]
    fn revin_roundtrip_is_identity(
        rows in prop::collection::vec(spread_signal(4, 24), 1..4),
        eps in prop::sample::select(vec![0.0f64, 1e-8, 1e-4]),
    ) {
        let t = rows.iter().map(Vec::len).min().unwrap();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r[..t].to_vec()).collect();
        let x = Tensor::matrix(&rows).unwrap();
        let (norm, stats) = revin_normalize(&x, eps).unwrap();
        let back = revin_denormalize(&norm, &stats).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn revin_theorem_holds_for_arbitrary_signals(x in spread_signal(4, 64)) {
        let rep = verify_revin_theorem(&x, 1e-12, 1e-8).unwrap();
        prop_assert!(rep.passed,
            "dc {:.3e} scale {:.3e} ratio {:.3e}",
            rep.dc_residual, rep.energy_scale, rep.ratio_residual);
    }

    // -- AMEO --------------------------------------------------------------

    #[test]
    fn ameo_theorem_holds_for_arbitrary_signals(
        x in spread_signal(8, 48),
        k in prop::sample::select(vec![2usize, 4, 6]),
        beta in prop::sample::select(vec![0.25f64, 0.75, 1.0]),
    ) {
        let rep = ameo::verify_ameo_theorem(&x, k, beta, 1e-8).unwrap();
        prop_assert!(rep.passed, "max rel {:.3e} over {} bins", rep.max_rel, rep.bins_checked);
    }

    // -- Splits and windows ------------------------------------------------

    #[test]
    fn splits_are_ordered_and_windows_never_leak(
        l in 40usize..400,
        t_len in 2usize..12,
        f_len in 1usize..8,
        r1 in 0.3f64..0.7,
        r2 in 0.1f64..0.3,
    ) {
        let r3 = 1.0 - r1 - r2;
        prop_assume!(r3 > 0.05);
        let ds = Dataset {
            name: "p".into(),
            channel_names: vec!["a".into()],
            values: vec![(0..l).map(|i| (i as f64).sin()).collect()],
        };
        let split = chronological_split(&ds, (r1, r2, r3), t_len).unwrap();
        // Segment bounds are ordered and within the series.
        prop_assert!(split.train.0 == 0 && split.train.1 <= l);
        prop_assert!(split.val.0 <= split.val.1 && split.val.1 <= l);
        prop_assert!(split.test.0 <= split.test.1 && split.test.1 == l);
        prop_assert!(split.val.0 + t_len.min(split.val.0 + 1) >= split.train.1.min(split.val.0 + 1));

        // No training target index reaches validation data, and no
        // validation target reaches test data: targets end at segment ends,
        // and later segments only reuse the final `t_len` of history.
        for w in windows_lenient(&ds, split.train, t_len, f_len) {
            prop_assert!(w.origin + t_len + f_len <= split.train.1);
        }
        for w in windows_lenient(&ds, split.val, t_len, f_len) {
            prop_assert!(w.origin >= split.val.0);
            prop_assert!(w.origin + t_len >= split.train.1, "val target inside train span");
            prop_assert!(w.origin + t_len + f_len <= split.val.1);
        }
        for w in windows_lenient(&ds, split.test, t_len, f_len) {
            prop_assert!(w.origin >= split.test.0);
            prop_assert!(w.origin + t_len >= split.val.1, "test target inside val span");
            prop_assert!(w.origin + t_len + f_len <= l);
        }
    }

    #[test]
    fn standardize_normalizes_train_and_inverts(
        rows in prop::collection::vec(spread_signal(30, 60), 1..3),
    ) {
        let l = rows.iter().map(Vec::len).min().unwrap();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r[..l].to_vec()).collect();
        let c = rows.len();
        let ds = Dataset {
            name: "p".into(),
            channel_names: (0..c).map(|i| format!("c{i}")).collect(),
            values: rows,
        };
        let split = chronological_split(&ds, (0.6, 0.2, 0.2), 4).unwrap();
        let (scaled, scaler) = standardize(&ds, &split).unwrap();
        for ch in 0..c {
            let seg = &scaled.values[ch][..split.train.1];
            let m: f64 = seg.iter().sum::<f64>() / seg.len() as f64;
            let var: f64 =
                seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / seg.len() as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
            let back = scaler.invert_channel(ch, &scaled.values[ch]);
            for (a, b) in back.iter().zip(&ds.values[ch]) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    // -- KET ---------------------------------------------------------------

    #[test]
    fn ket_routes_agree_for_arbitrary_shapes(
        b in 1usize..4,
        c in 1usize..5,
        t in prop::sample::select(vec![8usize, 12, 30]),
        alpha_std in prop::sample::select(vec![0.2f64, 1.0, 2.5]),
        seed in 0u64..1000,
    ) {
        let f = t / 2;
        let mut rng = derive_rng(seed, &[77]);
        let mut draw = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect();
            Tensor::new(shape, data).unwrap()
        };
        let x = draw(vec![b, c, t]);
        let y = draw(vec![b, c, f]);
        let (_, _, alpha, perm) = ket_mix(&x, &y, alpha_std, &mut rng).unwrap();
        let rep = verify_ket_equivalence(&x, &y, &alpha, &perm, 1e-10).unwrap();
        prop_assert!(rep.passed, "max diff {:.3e}", rep.max_diff_x.max(rep.max_diff_y));
    }

    // -- Parallel/sequential agreement --------------------------------------

    #[test]
    fn parallel_and_sequential_fold_identically(xs in prop::collection::vec(-100.0f64..100.0, 1..200)) {
        let f = |i: usize| (xs[i].sin() * xs[i]).exp().ln_1p();
        let par: Vec<f64> = map_range(true, xs.len(), f);
        let seq: Vec<f64> = map_range(false, xs.len(), f);
        for (a, b) in par.iter().zip(&seq) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
