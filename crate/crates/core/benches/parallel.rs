//! Sequential vs rayon execution of the data-parallel kernels.

use chandb::convnet::{pad_two_tier, ConvNet, NetStructure};
use chandb::gp_model::{gp_interpolate_with, GpParams, Neighborhood};
use chandb::knn::{knn_fill_with, KnnConfig};
use chandb::par::Parallelism;
use chandb::pipeline::ReferenceBenchmark;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn interpolators(c: &mut Criterion) {
    let bench = ReferenceBenchmark::default();
    let data = bench.dataset(&bench.sampler().unwrap(), 1).unwrap();
    let params: GpParams = bench.true_gp_params();
    let mut group = c.benchmark_group("interpolate_80x80");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::new("knn_k5", name), &par, |b, &par| {
            b.iter(|| knn_fill_with(&data.grid, &KnnConfig::default(), par).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("gp_n4", name), &par, |b, &par| {
            b.iter(|| gp_interpolate_with(&data.grid, &params, Neighborhood::new(4).unwrap(), par).unwrap())
        });
    }
    group.finish();
}

fn convnet(c: &mut Criterion) {
    let s: NetStructure = "9-1-5(64-32-1)".parse().unwrap();
    let net = ConvNet::from_structure(&s, 2, true, 1).unwrap();
    let (h, w) = (80, 80);
    let x = pad_two_tier(
        &Array2::from_shape_fn((h, w), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 11.0),
        &Array2::from_shape_fn((h, w), |(r, c)| ((r + c) % 2) as f64),
        net.shrink().unwrap(),
    )
    .unwrap();
    let truth = Array2::from_elem((h, w), 0.5);
    let labels = Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) % 5 == 0);
    let mut group = c.benchmark_group("convnet_9-1-5(64-32-1)_80x80");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::new("forward", name), &par, |b, &par| b.iter(|| net.forward_with(&x, par).unwrap()));
        group.bench_with_input(BenchmarkId::new("backward", name), &par, |b, &par| {
            b.iter(|| net.backward_with(&x, None, &truth, &labels, par).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, interpolators, convnet);
criterion_main!(benches);
