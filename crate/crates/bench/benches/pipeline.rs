//! Criterion benchmarks for the pipeline's hot phases.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use everify_bench::blob_fixture;
use everify_core::model::{train, TrainConfig};
use everify_core::perturb::{match_grad_delta, target_gradient, LabelMode, PerturbConfig};
use everify_core::tensor::Tensor;
use everify_core::unlearn::{ce_grad_flat, UnlearnObjective};
use everify_core::verify::t_quantile;

fn bench_t_quantile(c: &mut Criterion) {
    c.bench_function("t_quantile tau=0.05 df=49", |b| {
        b.iter(|| t_quantile(black_box(0.05), black_box(49)).unwrap())
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let f = blob_fixture();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    c.bench_function("train one epoch (240x4 blobs, [4,16,4])", |b| {
        b.iter(|| train(black_box(&f.trained), black_box(&f.split.train), &cfg).unwrap())
    });
}

fn bench_match_step(c: &mut Criterion) {
    let f = blob_fixture();
    let obj = UnlearnObjective::default();
    let cfg = PerturbConfig::default();
    let g_t = target_gradient(&obj, &f.trained, &f.targets, LabelMode::Targeted).unwrap();
    let delta = Tensor::zeros(f.split.erased.x.shape().to_vec());
    let _ = cfg;
    c.bench_function("matching-loss gradient (one UDPD iteration)", |b| {
        b.iter(|| {
            match_grad_delta(
                black_box(&f.trained),
                black_box(&f.split.erased),
                black_box(&g_t),
                black_box(&delta),
            )
            .unwrap()
        })
    });
}

fn bench_unlearn_grad(c: &mut Criterion) {
    let f = blob_fixture();
    c.bench_function("erased-set CE gradient", |b| {
        b.iter(|| ce_grad_flat(black_box(&f.trained), black_box(&f.split.erased)).unwrap())
    });
}

criterion_group!(benches, bench_t_quantile, bench_train_epoch, bench_match_step, bench_unlearn_grad);
criterion_main!(benches);
