use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mppd_core::batch::{run_batch, run_batch_seq};
use mppd_core::gen::GenConfig;
use mppd_core::runtime::SimConfig;

fn batch(c: &mut Criterion) {
    let gen = GenConfig::default();
    let sim = SimConfig::default();
    let mut group = c.benchmark_group("batch");
    group.sample_size(20);
    for n in [50u64, 200] {
        let seeds: Vec<u64> = (0..n).collect();
        group.throughput(Throughput::Elements(n));
        group.bench_with_input(BenchmarkId::new("sequential", n), &seeds, |b, s| {
            b.iter(|| run_batch_seq(black_box(s), &gen, &sim))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &seeds, |b, s| {
            b.iter(|| run_batch(black_box(s), &gen, &sim))
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
