use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ctxdiff::noise::seeded;
use ctxdiff::training::{loss_batch, nelbo};
use ctxdiff::{
    AdapterSpec, DatasetSpec, Generator, LambdaMode, LearnedAdapterSpec, Model, NelboOptions, SamplerConfig,
    ScheduleSpec, ToyDataset, ToyModel, TrainConfig, DenoiserSpec,
};

fn setup() -> (Model, ToyDataset) {
    let data = ToyDataset::generate(&DatasetSpec {
        generator: Generator::ToyGaussian {
            model: ToyModel::two_class(),
        },
        count: 1024,
        seed: 0,
    })
    .unwrap();
    let cfg = TrainConfig::new(
        "bench",
        ScheduleSpec::cosine(100),
        AdapterSpec::Learned(LearnedAdapterSpec::new(2, 2)),
        DenoiserSpec::new(2, 2),
    );
    (Model::init(&cfg).unwrap(), data)
}

fn loss(c: &mut Criterion) {
    let (model, data) = setup();
    let x0 = data.x.slice(ndarray::s![..128, ..]).to_owned();
    let classes = &data.classes[..128];
    let mut rng = seeded(0);
    c.bench_function("training/loss-and-grads-b128", |b| {
        b.iter(|| loss_batch(&model, black_box(&x0), classes, LambdaMode::Unit, None, true, &mut rng).unwrap())
    });
}

fn sampling(c: &mut Criterion) {
    let (model, _) = setup();
    let classes: Vec<usize> = (0..256).map(|i| i % 2).collect();
    let mut group = c.benchmark_group("sampling");
    group.sample_size(20);
    group.bench_function("ddpm-256x100", |b| {
        b.iter(|| model.reverse().sample_chain_classes(&classes, &SamplerConfig::ddpm(0)).unwrap())
    });
    group.bench_function("ddim-stride10-256", |b| {
        b.iter(|| model.reverse().sample_chain_classes(&classes, &SamplerConfig::ddim(10, 0.0, 0)).unwrap())
    });
    group.finish();
}

fn bound(c: &mut Criterion) {
    let (model, data) = setup();
    let head = data.head(256);
    let mut group = c.benchmark_group("nelbo");
    group.sample_size(10);
    group.bench_function("256-records-T100", |b| {
        b.iter(|| nelbo(&model.schedule, &model.adapter, &model.denoiser, &head, &NelboOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, loss, sampling, bound);
criterion_main!(benches);
