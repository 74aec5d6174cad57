use adpm_core::training_eval::{ece, fit_platt, pr_auc, roc_auc, ECE_BINS};
use adpm_core::Stream;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn scores(n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = Stream::new(9);
    let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.2).collect();
    let logits = labels
        .iter()
        .map(|&y| rng.normal() + if y { 1.0 } else { 0.0 })
        .collect();
    (logits, labels)
}

fn bench_metrics(c: &mut Criterion) {
    let (logits, labels) = scores(100_000);
    let probs: Vec<f64> = logits
        .iter()
        .map(|z: &f64| 1.0 / (1.0 + (-z).exp()))
        .collect();
    let mut group = c.benchmark_group("metrics_100k");
    group.bench_function("roc_auc", |b| {
        b.iter(|| black_box(roc_auc(&probs, &labels).unwrap()))
    });
    group.bench_function("pr_auc", |b| {
        b.iter(|| black_box(pr_auc(&probs, &labels).unwrap()))
    });
    group.bench_function("ece", |b| {
        b.iter(|| black_box(ece(&probs, &labels, ECE_BINS).unwrap()))
    });
    group.sample_size(20);
    group.bench_function("fit_platt", |b| {
        b.iter(|| black_box(fit_platt(&logits, &labels).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_metrics);
criterion_main!(benches);
