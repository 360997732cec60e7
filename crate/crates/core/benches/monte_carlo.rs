//! Monte Carlo hot paths under the rayon pool and on a single thread.
//! Build with `--no-default-features` to bench the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use learncert::attacks::{validate_certificate, ShiftPlacement};
use learncert::certify::{certify_learnability, CertRequest};
use learncert::data::{make_blobs, BlobSpec, LabeledDataset};
use learncert::nn::{self, Activation, ModelSpec, ParamVector, TrainConfig};
use learncert::smoothing::{sample_accuracies, SmoothingConfig};
use std::hint::black_box;

fn setup() -> (ModelSpec, ParamVector, LabeledDataset) {
    let (train, test) = make_blobs(&BlobSpec::default()).unwrap();
    let spec = ModelSpec::mlp(64, &[64], 10, Activation::Relu).unwrap();
    let theta = nn::train(&spec, &train, &TrainConfig { steps: 200, ..TrainConfig::default() }).unwrap();
    (spec, theta, test)
}

#[cfg(feature = "parallel")]
fn schedules() -> Vec<(String, rayon::ThreadPool)> {
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let all = rayon::current_num_threads();
    let mut out = vec![("1-thread".to_string(), pool(1))];
    if all > 1 {
        out.push((format!("{all}-threads"), pool(all)));
    }
    out
}

#[cfg(feature = "parallel")]
fn run_on<R: Send>(pool: &rayon::ThreadPool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn schedules() -> Vec<(String, ())> {
    vec![("sequential".to_string(), ())]
}

#[cfg(not(feature = "parallel"))]
fn run_on<R>(_: &(), f: impl FnOnce() -> R) -> R {
    f()
}

fn bench_sampling(c: &mut Criterion) {
    let (spec, theta, test) = setup();
    let cfg = SmoothingConfig { sigma: 0.25, n: 200, seed: 1 };
    let mut group = c.benchmark_group("sample_accuracies");
    group.sample_size(10);
    for (name, pool) in schedules() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| run_on(&pool, || sample_accuracies(black_box(&theta), &spec, &test, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_validation(c: &mut Criterion) {
    let (spec, theta, test) = setup();
    let samples = sample_accuracies(&theta, &spec, &test, &SmoothingConfig { sigma: 0.25, n: 1000, seed: 1 }).unwrap();
    let cert = certify_learnability(&samples, &CertRequest { q: 0.9, eta: 0.1, alpha: 0.01 }).unwrap();
    let mut group = c.benchmark_group("validate_certificate");
    group.sample_size(10);
    for (name, pool) in schedules() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| run_on(&pool, || validate_certificate(black_box(&theta), &spec, &test, &cert, 200, 3, ShiftPlacement::Boundary).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sampling, bench_validation);
criterion_main!(benches);
