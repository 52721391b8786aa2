use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxdiff::noise::seeded;
use ctxdiff::reverse::verify_ddim_marginals;
use ctxdiff::verify::random_learned;
use ctxdiff::{Condition, ContextAdapter, Fault, ForwardProcess, ScheduleSpec};

fn schedule(c: &mut Criterion) {
    c.bench_function("schedule/cosine-1000", |b| b.iter(|| ScheduleSpec::cosine(black_box(1000)).build().unwrap()));
}

fn forward(c: &mut Criterion) {
    let s = ScheduleSpec::cosine(1000).build().unwrap();
    let adapters = [
        ("zero", ContextAdapter::zero(2)),
        ("linear", ContextAdapter::linear_toy(2, 0.2).unwrap()),
        ("learned", random_learned(1000, 0).unwrap()),
    ];
    let x0 = [1.0, -0.5];
    let c0 = Condition::new(0);
    let mut group = c.benchmark_group("forward");
    for (name, a) in &adapters {
        let fp = ForwardProcess::new(&s, a);
        let mut rng = seeded(1);
        group.bench_with_input(BenchmarkId::new("sample_marginal", name), a, |b, _| {
            b.iter(|| fp.sample_marginal(black_box(&x0), c0, 500, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("verify_composition", name), a, |b, _| {
            b.iter(|| fp.verify_composition(black_box(&x0), c0).unwrap())
        });
    }
    group.finish();
}

fn ddim(c: &mut Criterion) {
    let s = ScheduleSpec::cosine(1000).build().unwrap();
    let a = random_learned(1000, 0).unwrap();
    c.bench_function("reverse/verify_ddim_marginals-learned", |b| {
        b.iter(|| verify_ddim_marginals(&s, &a, black_box(&[1.0, -0.5]), Condition::new(1), 0.5, Fault::None).unwrap())
    });
}

criterion_group!(benches, schedule, forward, ddim);
criterion_main!(benches);
