use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qscale_bench::{additive, instance, multiplicative};
use qscale_core::risk::{optimal_quantized, quant_feature_covariance, CovarianceMode};

fn closed_form(c: &mut Criterion) {
    let mut group = c.benchmark_group("hfq_closed_form");
    for (p, m) in [(256, 32), (1000, 200)] {
        let inst = instance(p, m).unwrap();
        for (label, q) in [("mult", multiplicative(1e-3)), ("add", additive(1e-8))] {
            group.bench_function(BenchmarkId::new(label, format!("p{p}_m{m}")), |b| {
                b.iter(|| quant_feature_covariance(black_box(&inst), &q, CovarianceMode::ClosedForm).unwrap())
            });
        }
    }
    group.finish();
}

fn optimum(c: &mut Criterion) {
    let inst = instance(1000, 200).unwrap();
    let q = multiplicative(1e-3);
    let hfq = quant_feature_covariance(&inst, &q, CovarianceMode::ClosedForm).unwrap();
    c.bench_function("optimal_quantized/p1000_m200", |b| {
        b.iter(|| optimal_quantized(black_box(&inst), &hfq).unwrap())
    });
}

fn monte_carlo(c: &mut Criterion) {
    let inst = instance(64, 16).unwrap();
    let q = multiplicative(1e-2);
    let mut group = c.benchmark_group("hfq_monte_carlo");
    group.sample_size(10);
    group.bench_function("p64_m16_r5000", |b| {
        b.iter(|| quant_feature_covariance(&inst, &q, CovarianceMode::MonteCarlo { samples: 5000, seed: 1 }).unwrap())
    });
    group.finish();
}

criterion_group!(benches, closed_form, optimum, monte_carlo);
criterion_main!(benches);
