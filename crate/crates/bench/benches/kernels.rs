use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sesa_bench::masked;
use sesa_core::attention::attention_forward;
use sesa_core::baselines::knn_impute;
use sesa_core::fiml::{conditional_impute, em_fit};
use sesa_core::metrics::{wilcoxon_signed_rank, EffectSize};
use sesa_core::notears::{acyclicity_h, notears_fit};
use sesa_core::synth::{correlated_dataset, linear_sem_samples, random_dag};
use sesa_core::training::{grad_composite, ml_covariance, LossState};
use sesa_core::{AttentionParams, Dataset, EmConfig, LossWeights, NotearsConfig};

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    for n in [250, 1000] {
        let x = correlated_dataset(n, 6, 0.5, 1).unwrap().values().clone();
        let p = AttentionParams::init(6, 6, 2).unwrap();
        g.bench_with_input(BenchmarkId::new("forward", n), &x, |b, x| {
            b.iter(|| attention_forward(black_box(x), &p).unwrap())
        });
        let free = x.map(|v| v > 0.5);
        let state = LossState::new(x.clone(), free.clone(), x.clone(), free, ml_covariance(&x)).unwrap();
        g.bench_with_input(BenchmarkId::new("grad_composite", n), &state, |b, st| {
            b.iter(|| grad_composite(black_box(st), &p, &LossWeights::default()).unwrap())
        });
    }
    g.finish();
}

fn fiml(c: &mut Criterion) {
    let ds = masked(1000, 6, 3);
    let cfg = EmConfig::default();
    c.bench_function("em_fit 1000x6", |b| b.iter(|| em_fit(black_box(&ds), &cfg).unwrap()));
    let params = em_fit(&ds, &cfg).unwrap().params;
    c.bench_function("conditional_impute 1000x6", |b| {
        b.iter(|| conditional_impute(&params, black_box(&ds)).unwrap())
    });
}

fn knn(c: &mut Criterion) {
    let ds = masked(500, 6, 4);
    c.bench_function("knn_impute 500x6 k=5", |b| b.iter(|| knn_impute(black_box(&ds), 5).unwrap()));
}

fn notears(c: &mut Criterion) {
    let w = random_dag(8, 0.4, 5);
    c.bench_function("acyclicity_h d=8", |b| b.iter(|| acyclicity_h(black_box(&w))));
    let x = linear_sem_samples(&random_dag(5, 0.4, 6), 500, 6);
    let ds = Dataset::complete(x, Dataset::generic_specs(5)).unwrap();
    let mut g = c.benchmark_group("notears");
    g.sample_size(10);
    g.bench_function("fit 500x5", |b| b.iter(|| notears_fit(black_box(&ds), &NotearsConfig::default()).unwrap()));
    g.finish();
}

fn wilcoxon(c: &mut Criterion) {
    for n in [20, 1000] {
        let pred: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let truth: Vec<f64> = (0..n).map(|i| ((i * 53) % 97) as f64 * 0.1).collect();
        c.bench_function(&format!("wilcoxon n={n}"), |b| {
            b.iter(|| wilcoxon_signed_rank(black_box(&pred), &truth, n, EffectSize::default()).unwrap())
        });
    }
}

criterion_group!(benches, attention, fiml, knn, notears, wilcoxon);
criterion_main!(benches);
