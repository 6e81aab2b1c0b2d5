use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tpgsr_bench::{desk_model, image_batch, infer_pass, train_pass};

fn desk(c: &mut Criterion) {
    let (lr, hr) = image_batch(8, 11);
    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    for stages in [1, 3] {
        let (mut store, model) = desk_model(stages, 12);
        group.bench_with_input(BenchmarkId::new("infer", stages), &stages, |b, _| {
            b.iter(|| black_box(infer_pass(&mut store, &model, &lr)))
        });
        group.bench_with_input(BenchmarkId::new("train_pass", stages), &stages, |b, _| {
            b.iter(|| black_box(train_pass(&mut store, &model, &lr, &hr)))
        });
    }
    group.finish();
}

criterion_group!(benches, desk);
criterion_main!(benches);
