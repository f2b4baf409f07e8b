//! Benchmarks along the draft-and-verify pipeline: head forward passes,
//! CP-distribution operations, sequential sampling, and full speculative
//! steps, at desk-scale dimensions (V=512, E=64, n=4).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cphead::rng::SplitMix64;
use cphead::sampler::sample_sequence_with;
use cphead::speculative::{spec_step_greedy, GenState};
use cphead_bench::{demo_dist, demo_model};

fn bench_cp_ops(c: &mut Criterion) {
    let mut group = c.benchmark_group("cp");
    for rank in [1usize, 4, 8] {
        let dist = demo_dist(4, rank, 512, 7);
        let tokens = [17usize, 400, 3, 255];
        group.bench_with_input(BenchmarkId::new("log_prob", rank), &rank, |b, _| {
            b.iter(|| dist.log_prob(black_box(&tokens)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("first_marginal", rank), &rank, |b, _| {
            b.iter(|| dist.first_token_marginal().unwrap())
        });
        group.bench_with_input(BenchmarkId::new("condition_on", rank), &rank, |b, _| {
            b.iter(|| dist.condition_on(black_box(0), black_box(17)).unwrap())
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("sampler");
    for rank in [1usize, 4, 8] {
        let dist = demo_dist(4, rank, 512, 11);
        group.bench_with_input(BenchmarkId::new("sample_sequence", rank), &rank, |b, _| {
            let mut rng = SplitMix64::new(3);
            b.iter(|| sample_sequence_with(black_box(&dist), 1.0, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_and_spec(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    for rank in [1usize, 4, 8] {
        let model = demo_model(512, 64, 4, rank);
        let prompt: Vec<usize> = (0..32).map(|i| (i * 37) % 512).collect();
        let e = model.embed_last(&prompt).unwrap();
        group.bench_with_input(BenchmarkId::new("head_forward", rank), &rank, |b, _| {
            b.iter(|| model.forward(black_box(&e)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("spec_step_greedy", rank), &rank, |b, _| {
            b.iter_batched(
                || GenState::from_prompt(&model, &prompt).unwrap(),
                |mut state| spec_step_greedy(&model, &mut state).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_cp_ops,
    bench_sampling,
    bench_forward_and_spec
);
criterion_main!(benches);
