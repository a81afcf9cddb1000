use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dfscope_bench::{sim_backend, Switch};
use dfscope_core::dropit::bench_switch;

fn host(c: &mut Criterion) {
    let s = Switch::new(3);
    let mut g = c.benchmark_group("switch");
    g.bench_function("unprotected", |b| b.iter(|| black_box(&s).unprotected()));
    g.bench_function("spinlock", |b| b.iter(|| black_box(&s).spinlock()));
    g.bench_function("dropit", |b| b.iter(|| black_box(&s).region()));
    g.finish();
}

fn simulated(c: &mut Criterion) {
    let backend = sim_backend(1);
    c.bench_function("switch/sim_10k", |b| b.iter(|| bench_switch(&backend, 10_000).unwrap()));
}

criterion_group!(benches, host, simulated);
criterion_main!(benches);
