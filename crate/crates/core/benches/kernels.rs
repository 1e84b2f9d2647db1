//! Hot kernels under the active backend. Compare the two backends with
//!
//! ```text
//! cargo bench -p bitsiam --bench kernels -- --save-baseline parallel
//! cargo bench -p bitsiam --bench kernels --no-default-features -- --baseline parallel
//! ```
//!
//! Benchmark ids carry the backend name so saved reports stay apart.

use bitsiam::backbone::{build_model, BackboneConfig, NormKind, StemKind};
use bitsiam::eval::{collapse_std, knn_predict, tsne, TsneConfig};
use bitsiam::nn::conv2d;
use bitsiam::nn::norm::{group_norm, NORM_EPS};
use bitsiam::par::{is_parallel, map_range};
use bitsiam::ssl::{augment_pair, AugConfig, AugPolicy};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn backend() -> &'static str {
    if is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn normal<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(shape: Sh, seed: u64) -> ndarray::Array<f32, D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ndarray::Array::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

fn bench_conv(c: &mut Criterion) {
    let x: Array4<f32> = normal((16, 32, 32, 32), 1);
    let w: Array4<f32> = normal((64, 32, 3, 3), 2);
    c.bench_function(&format!("conv3x3_16x32x32x32/{}", backend()), |b| {
        b.iter(|| conv2d(black_box(x.view()), w.view(), 1, 1).unwrap())
    });
}

fn bench_group_norm(c: &mut Criterion) {
    let x: Array4<f32> = normal((32, 64, 16, 16), 3);
    let (g, bt) = (vec![1.0; 64], vec![0.0; 64]);
    c.bench_function(&format!("group_norm_32x64x16x16/{}", backend()), |b| {
        b.iter(|| group_norm(black_box(x.view()), 32, &g, &bt, NORM_EPS).unwrap())
    });
}

fn bench_knn(c: &mut Criterion) {
    let train: Array2<f32> = normal((2000, 512), 4);
    let query: Array2<f32> = normal((500, 512), 5);
    let labels: Vec<usize> = (0..2000).map(|i| i % 7).collect();
    c.bench_function(&format!("knn_2000x500x512_k20/{}", backend()), |b| {
        b.iter(|| knn_predict(train.view(), &labels, black_box(query.view()), 20, 0.07).unwrap())
    });
}

fn bench_collapse(c: &mut Criterion) {
    let z: Array2<f32> = normal((4096, 256), 6);
    c.bench_function(&format!("collapse_std_4096x256/{}", backend()), |b| {
        b.iter(|| collapse_std(black_box(z.view())).unwrap())
    });
}

fn bench_tsne(c: &mut Criterion) {
    let x: Array2<f32> = normal((300, 64), 7);
    let cfg = TsneConfig {
        perplexity: 30.0,
        iterations: 250,
        seed: 0,
        ..Default::default()
    };
    let mut g = c.benchmark_group("tsne");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("300x64", backend()), |b| b.iter(|| tsne(black_box(x.view()), &cfg).unwrap()));
    g.finish();
}

fn bench_augment(c: &mut Criterion) {
    let images: Vec<Array3<f32>> = (0..64).map(|i| normal((3, 32, 32), 10 + i).mapv(|v| v.abs().min(1.0))).collect();
    let cfg = AugConfig::for_policy(AugPolicy::Cifar32, None);
    c.bench_function(&format!("augment_pairs_64x32px/{}", backend()), |b| {
        b.iter(|| map_range(images.len(), |i| augment_pair(images[i].view(), &cfg, i, 42)))
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = BackboneConfig::resnet50(NormKind::BatchNorm)
        .with_depth(14)
        .with_width(0.25)
        .with_stem(StemKind::Cifar);
    let model = build_model(cfg, None, 0).unwrap();
    let x: Array4<f32> = normal((16, 3, 32, 32), 8);
    let mut g = c.benchmark_group("resnet14x0.25_features_16x32px");
    g.sample_size(10);
    g.bench_function(backend(), |b| b.iter(|| model.features(black_box(&x)).unwrap()));
    g.finish();
}

criterion_group!(
    name = benches;
    // HTML plots need system fonts; the numbers are all we use.
    config = Criterion::default().without_plots();
    targets = bench_conv,
    bench_group_norm,
    bench_knn,
    bench_collapse,
    bench_tsne,
    bench_augment,
    bench_forward
);
criterion_main!(benches);
