//! Parallel vs sequential throughput on the three hot reduction shapes:
//! forecasting many windows, per-sample batch gradients, and a verifier
//! sweep. Both arms run the identical closure through `map_range`, so the
//! comparison isolates the scheduling strategy; outputs are combined in
//! index order and the two arms agree bitwise. Gains scale with available
//! cores (with the `parallel` feature off, both arms are sequential).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use refocus_core::ameo::verify_ameo_theorem;
use refocus_core::data::{chronological_split, standardize, synth_forecast_task, windows, WindowPair};
use refocus_core::ekpb::PickStrategy;
use refocus_core::model::{
    model_forward, EvalPick, HeadKind, ModelParams, ModelPickMode, ReFocusConfig,
};
use refocus_core::par::map_range;
use refocus_core::rng::derive_rng;
use refocus_core::training::model_predict;
use refocus_core::Tape;

fn fixture() -> (ModelParams, Vec<WindowPair>) {
    let mut rng = derive_rng(4242, &[0]);
    let ds = synth_forecast_task(4, 600, &[6, 14], 10.0, &mut rng).expect("task");
    let split = chronological_split(&ds, (0.6, 0.2, 0.2), 48).expect("split");
    let (scaled, _) = standardize(&ds, &split).expect("standardize");
    let w = windows(&scaled, split.train, 48, 24).expect("windows");
    let config = ReFocusConfig {
        c: 4,
        t: 48,
        f: 24,
        d: 32,
        q: 16,
        n: 2,
        k: 9,
        beta: 0.5,
        strategy: PickStrategy::Max,
        eps: 1e-8,
        seed: 4242,
        head: HeadKind::FreqDomain,
        eval_pick: EvalPick::Greedy,
    };
    let params = ModelParams::init(&config).expect("init");
    (params, w)
}

fn bench_forecast_windows(c: &mut Criterion) {
    let (params, windows) = fixture();
    let windows = &windows[..64.min(windows.len())];
    let mut group = c.benchmark_group("forecast_windows");
    for &parallel in &[false, true] {
        group.bench_with_input(
            BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }),
            &parallel,
            |b, &parallel| {
                b.iter(|| {
                    let preds: Vec<_> = map_range(parallel, windows.len(), |i| {
                        model_predict(&params, &windows[i].x, i as u64).expect("predict")
                    });
                    preds
                })
            },
        );
    }
    group.finish();
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (params, windows) = fixture();
    let windows = &windows[..16.min(windows.len())];
    let mut group = c.benchmark_group("batch_gradients");
    for &parallel in &[false, true] {
        group.bench_with_input(
            BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }),
            &parallel,
            |b, &parallel| {
                b.iter(|| {
                    let grads: Vec<Vec<Vec<f64>>> = map_range(parallel, windows.len(), |i| {
                        let w = &windows[i];
                        let mut tape = Tape::new();
                        let bind = params.bind(&mut tape, true);
                        let xid = tape.constant(w.x.clone());
                        let (yhat, _) =
                            model_forward(&mut tape, &bind, xid, ModelPickMode::Greedy)
                                .expect("forward");
                        let target = tape.constant(w.y.clone());
                        let diff = tape.sub(yhat, target).expect("diff");
                        let sq = tape.mul(diff, diff).expect("square");
                        let loss = tape.mean(sq, None).expect("loss");
                        tape.backward(loss).expect("backward");
                        bind.param_ids()
                            .iter()
                            .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
                            .collect()
                    });
                    grads
                })
            },
        );
    }
    group.finish();
}

fn bench_verifier_sweep(c: &mut Criterion) {
    let signals: Vec<Vec<f64>> = (0..48u64)
        .map(|i| {
            let mut rng = derive_rng(7, &[i]);
            (0..96).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()
        })
        .collect();
    let mut group = c.benchmark_group("verifier_sweep");
    for &parallel in &[false, true] {
        group.bench_with_input(
            BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }),
            &parallel,
            |b, &parallel| {
                b.iter(|| {
                    let residuals: Vec<f64> = map_range(parallel, signals.len(), |i| {
                        verify_ameo_theorem(&signals[i], 8, 0.5, 1e-9)
                            .expect("verifier")
                            .max_rel
                    });
                    residuals
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_forecast_windows, bench_batch_gradients, bench_verifier_sweep);
criterion_main!(benches);
