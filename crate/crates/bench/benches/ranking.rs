use adpm_bench::fixture;
use adpm_core::adsformer::AdpmConfig;
use adpm_core::ranking::{forward, predict, RankingConfig, RankingModel, Task};
use adpm_core::training_eval::{train, SamplingMode, TrainConfig};
use adpm_core::{Graph, ParamStore, Stream};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn model(f: &adpm_bench::Fixture, adpm: Option<&AdpmConfig>) -> (ParamStore, RankingModel) {
    let mut store = ParamStore::new();
    let m = RankingModel::new(
        &RankingConfig::ctr(),
        f.data.context_dim(),
        adpm.map(|a| (a, &f.vocabs)),
        &mut store,
        &mut Stream::new(4),
    )
    .unwrap();
    (store, m)
}

fn bench_forward(c: &mut Criterion) {
    let f = fixture(2000);
    let rows: Vec<usize> = (0..64).collect();
    let full = AdpmConfig::ctr();
    let mut group = c.benchmark_group("ctr_batch64");
    group.sample_size(20);
    for (name, adpm) in [("baseline", None), ("adpm_full", Some(&full))] {
        let (store, m) = model(&f, adpm);
        let batch = f.data.batch(&rows, Task::Ctr, &m, Some(&f.vocabs)).unwrap();
        group.bench_function(format!("{name}/predict"), |b| {
            b.iter(|| black_box(predict(&store, &m, &f.pretrained, &batch).unwrap()))
        });
        group.bench_function(format!("{name}/forward_backward"), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let out = forward(
                    &mut g,
                    &store,
                    &m,
                    &f.pretrained,
                    &batch,
                    true,
                    &mut Stream::new(5),
                )
                .unwrap();
                let loss = g.bce(out.probs, &batch.labels).unwrap();
                g.backward(loss).unwrap();
                black_box(g.param_grads().len())
            })
        });
    }
    group.finish();
}

fn bench_train_epoch(c: &mut Criterion) {
    let f = fixture(1024);
    let full = AdpmConfig::ctr();
    let cfg = TrainConfig {
        batch_size: 128,
        sampling: SamplingMode::None,
        ..TrainConfig::for_task(Task::Ctr)
    };
    let mut group = c.benchmark_group("train_1024_rows");
    group.sample_size(10);
    group.bench_function("adpm_full", |b| {
        b.iter_batched(
            || model(&f, Some(&full)),
            |(mut store, m)| {
                black_box(
                    train(
                        &mut store,
                        &m,
                        &f.pretrained,
                        Some(&f.vocabs),
                        &f.data,
                        &cfg,
                    )
                    .unwrap(),
                )
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_forward, bench_train_epoch);
criterion_main!(benches);
