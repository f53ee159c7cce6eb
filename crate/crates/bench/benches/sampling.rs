use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vqdiff_bench::{model, schedule, toy_oracle};
use vqdiff_core::rng::substream;
use vqdiff_core::sampler::{ar_sample, sample, truncate, SamplerConfig};
use vqdiff_core::Condition;

fn oracle(c: &mut Criterion) {
    let oracle = toy_oracle();
    let s = schedule(4);
    let mut group = c.benchmark_group("oracle sample 2x2");
    for stride in [1, 4] {
        let cfg = SamplerConfig {
            stride,
            truncation_r: 1.0,
            seed: 0,
        };
        group.bench_with_input(BenchmarkId::new("stride", stride), &cfg, |b, cfg| {
            let mut i = 0u64;
            b.iter(|| {
                i += 1;
                sample(&oracle, 2, 2, &Condition::empty(), &s, cfg, &mut substream(0, &[i]))
            })
        });
    }
    group.finish();

    let p: Vec<f64> = (1..=17).map(|i| i as f64 / 153.0).collect();
    c.bench_function("truncate 17", |b| b.iter(|| truncate(black_box(&p), 0.86)));
}

fn diffusion_vs_ar(c: &mut Criterion) {
    let s = schedule(16);
    let diffusion = model(16, 8, 16, false);
    let ar = model(16, 8, 16, true);
    let cfg = SamplerConfig {
        stride: 4,
        ..SamplerConfig::default()
    };
    let mut group = c.benchmark_group("8x8 image");
    group.sample_size(10);
    group.bench_function("diffusion 25 steps", |b| {
        b.iter(|| sample(&diffusion, 8, 8, &Condition::empty(), &s, &cfg, &mut substream(1, &[])))
    });
    group.bench_function("autoregressive 64 steps", |b| {
        b.iter(|| ar_sample(&ar, 8, 8, &Condition::empty(), &mut substream(1, &[])))
    });
    group.finish();
}

criterion_group!(benches, oracle, diffusion_vs_ar);
criterion_main!(benches);
