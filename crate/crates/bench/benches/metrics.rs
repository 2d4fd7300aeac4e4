use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dmsconv::evaluation::{cavg, eer};
use dmsconv_bench::scores;

fn metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    for languages in [6, 20] {
        let table = scores(languages, 200, 0.5);
        group.bench_with_input(BenchmarkId::new("cavg", languages), &table, |b, t| {
            b.iter(|| cavg(t).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("eer", languages), &table, |b, t| {
            b.iter(|| eer(t).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, metrics);
criterion_main!(benches);
