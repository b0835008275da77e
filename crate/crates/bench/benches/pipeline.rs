use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use failrules_bench::{binary_signal, random_tensor, separable_rows, stream};
use failrules_core::autoencoder::conv1d;
use failrules_core::detector::lowpass;
use failrules_core::rulelearn::fit_tree;
use failrules_core::windowing::{aggregate, make_windows};
use failrules_core::{LabeledSet, WindowSpec};
use std::hint::black_box;

fn bench_conv1d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv1d");
    for dilation in [1, 16, 256] {
        let x = random_tensor(&[8, 30, 1800], 1);
        let w = random_tensor(&[30, 30, 3], 2);
        let b = random_tensor(&[30], 3);
        g.bench_with_input(
            BenchmarkId::from_parameter(dilation),
            &dilation,
            |bch, &d| bch.iter(|| conv1d(black_box(&x), &w, &b, d).unwrap()),
        );
    }
    g.finish();
}

fn bench_aggregate(c: &mut Criterion) {
    let frame = stream(20_000, 4);
    let windows = make_windows(&frame, WindowSpec::new(1800, 300).unwrap()).unwrap();
    c.bench_function("aggregate_1800x4", |b| {
        b.iter(|| {
            for w in &windows {
                black_box(aggregate(black_box(w)));
            }
        })
    });
}

fn bench_fit_tree(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_tree");
    for n in [100, 1000, 5000] {
        let (rows, labels) = separable_rows(n, 32, 5);
        let set = LabeledSet::new(rows.iter().map(|r| r.as_slice()).collect(), labels).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &set, |b, s| {
            b.iter(|| fit_tree(black_box(s), None).unwrap())
        });
    }
    g.finish();
}

fn bench_lowpass(c: &mut Criterion) {
    let y = binary_signal(100_000, 6);
    c.bench_function("lowpass_100k", |b| {
        b.iter(|| lowpass(black_box(&y), 0.15).unwrap())
    });
}

criterion_group!(
    benches,
    bench_conv1d,
    bench_aggregate,
    bench_fit_tree,
    bench_lowpass
);
criterion_main!(benches);
