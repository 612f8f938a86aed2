use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tcm_bench::{dcm_state, proxy_model, random_matrix, world};
use tcm_core::dcm::{competitive_step, record_cyclegan, FORWARD};
use tcm_core::graddiff::Tape;
use tcm_core::numerics::{pinv, RngStream, DEFAULT_RCOND};
use tcm_core::proxy::infer_batch;
use tcm_core::scm::{oracle_batch, Domain};

fn bench_pinv(c: &mut Criterion) {
    let mut g = c.benchmark_group("pinv");
    for n in [4, 8, 16] {
        let a = random_matrix(n, n, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| {
            b.iter(|| pinv(black_box(a), DEFAULT_RCOND).unwrap())
        });
    }
    g.finish();
}

fn bench_backward(c: &mut Criterion) {
    let w = world();
    let (state, pairs, disc) = dcm_state(1, w.cfg.scm.n);
    let batch = w
        .source
        .features()
        .select_rows(&(0..64).collect::<Vec<_>>());
    let pair = &pairs[0];
    c.bench_function("cyclegan_forward_backward_64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(batch.clone());
            let v = record_cyclegan(
                &mut tape,
                &pair.mlp,
                &pair.params,
                &disc,
                &disc.params,
                x,
                Domain::Source,
                state.weights,
            )
            .unwrap();
            let g = tape.backward(v.total).unwrap();
            black_box(g.get(&format!("{FORWARD}.l0.w")).is_some())
        })
    });
}

fn bench_oracle(c: &mut Criterion) {
    let w = world();
    let xs = w
        .target
        .features()
        .select_rows(&(0..200).collect::<Vec<_>>());
    c.bench_function("oracle_batch_200x10000", |b| {
        b.iter(|| {
            oracle_batch(
                &w.spec,
                black_box(&xs),
                Domain::Target,
                10_000,
                &mut RngStream::new(3, 0),
            )
            .unwrap()
        })
    });
}

fn bench_competitive_step(c: &mut Criterion) {
    let w = world();
    let batch = w
        .source
        .features()
        .select_rows(&(0..64).collect::<Vec<_>>());
    let mut g = c.benchmark_group("competitive_step");
    for k in [1, 3, 6] {
        let (mut state, mut pairs, mut disc) = dcm_state(k, w.cfg.scm.n);
        g.bench_function(BenchmarkId::from_parameter(k), |b| {
            b.iter(|| {
                competitive_step(&mut state, &mut pairs, &mut disc, &batch, Domain::Source)
                    .unwrap()
                    .winner
            })
        });
    }
    g.finish();
}

fn bench_infer(c: &mut Criterion) {
    let w = world();
    let model = proxy_model(&w, 3);
    let xs = w.target.features();
    c.bench_function("infer_batch_2000_k3", |b| {
        b.iter(|| infer_batch(&model, black_box(xs)).unwrap().len())
    });
}

criterion_group!(
    benches,
    bench_pinv,
    bench_backward,
    bench_oracle,
    bench_competitive_step,
    bench_infer
);
criterion_main!(benches);
