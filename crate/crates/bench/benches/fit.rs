use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qscale_bench::synthetic_points;
use qscale_core::{fit_single_axis, Axis};

fn floor_grid_fit(c: &mut Criterion) {
    let pts = synthetic_points(Axis::NEff);
    c.bench_function("fit_single_axis/10_points", |b| {
        b.iter(|| fit_single_axis(black_box(&pts), Axis::NEff).unwrap())
    });
}

criterion_group!(benches, floor_grid_fit);
criterion_main!(benches);
