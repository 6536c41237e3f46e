use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use snp_core::gp::{self, Task};
use snp_core::parallel;
use snp_core::shapes2d::{self, Regime};
use snp_core::tensor::{self, ConvGeom};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 256] {
        let a: Vec<f32> = (0..n * n).map(|i| (i as f32 * 0.013).sin()).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i as f32 * 0.007).cos()).collect();
        for (name, par) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| parallel::with_mode(par, || tensor::matmul(black_box(&a), &b, n, n, n)))
            });
        }
    }
    group.finish();
}

fn bench_im2col(c: &mut Criterion) {
    let mut group = c.benchmark_group("im2col");
    let g = ConvGeom {
        channels: 16,
        height: 32,
        width: 32,
        kernel: 5,
        stride: 1,
        pad: 2,
    };
    let x: Vec<f32> = (0..16 * 32 * 32).map(|i| (i as f32).sin()).collect();
    for (name, par) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| parallel::with_mode(par, || tensor::im2col(black_box(&x), &g)))
        });
    }
    group.finish();
}

fn bench_episodes(c: &mut Criterion) {
    let mut group = c.benchmark_group("episodes");
    group.sample_size(10);
    let seeds: Vec<u64> = (0..16).collect();
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::new("gp_task_a", name), |bench| {
            bench.iter(|| parallel::with_mode(par, || gp::sample_episodes(Task::A, black_box(&seeds))))
        });
        group.bench_function(BenchmarkId::new("shapes_tracking", name), |bench| {
            bench.iter(|| {
                parallel::with_mode(par, || {
                    shapes2d::sample_episodes2d(Regime::Tracking, 5, black_box(&seeds[..4]))
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_im2col, bench_episodes);
criterion_main!(benches);
