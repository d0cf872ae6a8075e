use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use normkit::ops::{conv2d_backward, conv2d_forward, ConvGeometry};
use normkit::rng::{normal_tensor, SeededRng};
use normkit::{build_partition, norm_backward, norm_forward, Mode, NormKind, NormParams, Shape4, Tensor4};
use std::hint::black_box;

fn norm_kernels(c: &mut Criterion) {
    let shape = Shape4::new(8, 32, 16, 16);
    let mut rng = SeededRng::new(0);
    let x: Tensor4<f32> = normal_tensor(&mut rng, shape, 1.0);
    let dy: Tensor4<f32> = normal_tensor(&mut rng, shape, 1.0);
    let params = NormParams::<f32>::new(shape.c);
    let kinds = [
        NormKind::Batch,
        NormKind::Instance,
        NormKind::Layer,
        NormKind::Group(8),
        NormKind::Positional,
        NormKind::BatchGroup(16),
    ];

    let mut group = c.benchmark_group("norm_forward");
    for kind in kinds {
        let part = build_partition(kind, shape).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(kind), &part, |b, part| {
            b.iter(|| norm_forward(black_box(&x), part, &params, None, Mode::Train, 1e-5).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("norm_backward");
    for kind in kinds {
        let part = build_partition(kind, shape).unwrap();
        let (_, cache) = norm_forward(&x, &part, &params, None, Mode::Train, 1e-5).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(kind), &cache, |b, cache| {
            b.iter(|| norm_backward(black_box(&dy), cache, &params).unwrap())
        });
    }
    group.finish();

    c.bench_function("build_partition/bgn(G=16)", |b| {
        b.iter(|| build_partition(NormKind::BatchGroup(16), black_box(shape)).unwrap())
    });
}

fn conv_kernels(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let x: Tensor4<f32> = normal_tensor(&mut rng, Shape4::new(8, 16, 16, 16), 1.0);
    let w: Tensor4<f32> = normal_tensor(&mut rng, Shape4::new(32, 16, 3, 3), 0.1);
    let bias = vec![0.0f32; 32];
    let geom = ConvGeometry::new(1, 1);
    c.bench_function("conv2d_forward/8x16x16x16->32", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &w, &bias, geom).unwrap())
    });
    let (y, cache) = conv2d_forward(&x, &w, &bias, geom).unwrap();
    c.bench_function("conv2d_backward/8x16x16x16->32", |b| {
        b.iter(|| conv2d_backward(&cache, black_box(&y)).unwrap())
    });
}

criterion_group!(benches, norm_kernels, conv_kernels);
criterion_main!(benches);
