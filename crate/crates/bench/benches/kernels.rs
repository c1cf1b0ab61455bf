use candle_core::{DType, Device, Tensor};
use ccreid_bench::retrieval_fixture;
use ccreid_core::cpre::{apply_cpre, sample_keep_mask, EraseMode};
use ccreid_core::eval::{compute_cmc_map, Protocol};
use ccreid_core::model::{spatial_softmax, ForwardMode, ModelConfig, ReidModel};
use ccreid_core::{BinaryMask, SeedStream};
use criterion::{criterion_group, criterion_main, Criterion};
use image::RgbImage;
use std::hint::black_box;

fn softmax(c: &mut Criterion) {
    let logits = Tensor::randn(0f32, 1.0, (64, 24, 12), &Device::Cpu).unwrap();
    c.bench_function("spatial_softmax 64x24x12", |b| {
        b.iter(|| spatial_softmax(black_box(&logits)).unwrap())
    });
}

fn cpre(c: &mut Criterion) {
    let mask = BinaryMask::from_fn(384, 192, |y, _| u8::from((100..300).contains(&y)));
    let image = RgbImage::from_pixel(192, 384, image::Rgb([120, 80, 40]));
    c.bench_function("cpre keep mask + apply 384x192", |b| {
        b.iter(|| {
            let keep = sample_keep_mask(&mask, 0.2, EraseMode::Bernoulli, SeedStream::new(7)).unwrap();
            apply_cpre(black_box(&image), &mask, &keep, [0, 0, 0]).unwrap()
        })
    });
}

fn retrieval(c: &mut Criterion) {
    let (q, ql) = retrieval_fixture(200, 128, 50, 1);
    let (g, gl) = retrieval_fixture(1000, 128, 50, 2);
    c.bench_function("cmc/map 200x1000 cloth-changing", |b| {
        b.iter(|| compute_cmc_map(black_box(&q), &ql, &g, &gl, Protocol::CLOTH_CHANGING).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig {
        num_identities: 16,
        num_clothes_classes: 48,
        ..ModelConfig::default()
    };
    let model = ReidModel::new(cfg, DType::F32, SeedStream::new(0)).unwrap();
    let x = Tensor::randn(0f32, 1.0, (64, 3, 64, 32), &Device::Cpu).unwrap();
    c.bench_function("tiny_cnn eval forward batch 64", |b| {
        b.iter(|| model.forward(black_box(&x), ForwardMode::Eval, false).unwrap())
    });
}

criterion_group!(benches, softmax, cpre, retrieval, forward);
criterion_main!(benches);
