use std::collections::HashMap;
use std::hint::black_box;

use afine_core::backbone::extract_pyramid;
use afine_core::baselines::{psnr, ssim_global};
use afine_core::data::build_training_set;
use afine_core::fidelity::fidelity_score;
use afine_core::naturalness::naturalness_score;
use afine_core::model::{afine_score, image_features, score_features};
use afine_core::synthetic::{self, degrade, texture};
use afine_core::train::{loss_and_gradients, Objective};
use afine_core::{BackboneConfig, ModelParameters, ParamMask};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn scoring(c: &mut Criterion) {
    let params = ModelParameters::init(BackboneConfig::toy(0)).unwrap();
    let mut group = c.benchmark_group("afine_score");
    for side in [32, 64, 128] {
        let x = texture(side, 1);
        let y = degrade(&x, 2.0, 2);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| afine_score(black_box(&x), black_box(&y), &params).unwrap())
        });
    }
    group.finish();

    let x = texture(64, 1);
    let y = degrade(&x, 2.0, 2);
    let (fx, fy) = (image_features(&x, &params).unwrap(), image_features(&y, &params).unwrap());
    c.bench_function("score_cached_features_64", |b| b.iter(|| score_features(black_box(&fx), black_box(&fy), &params).unwrap()));
    let (px, py) = (extract_pyramid(&x, &params.backbone).unwrap(), extract_pyramid(&y, &params.backbone).unwrap());
    c.bench_function("fidelity_64", |b| b.iter(|| fidelity_score(black_box(&px), black_box(&py), &params.fidelity).unwrap()));
    c.bench_function("naturalness_64", |b| b.iter(|| naturalness_score(black_box(&x), black_box(&px), &params.naturalness).unwrap()));
    c.bench_function("color_statistics_64", |b| b.iter(|| black_box(&x).color_statistics()));
    c.bench_function("toy_pyramid_64", |b| b.iter(|| extract_pyramid(black_box(&x), &params.backbone).unwrap()));
    c.bench_function("psnr_64", |b| b.iter(|| psnr(black_box(&x), black_box(&y)).unwrap()));
    c.bench_function("ssim_64", |b| b.iter(|| ssim_global(black_box(&x), black_box(&y)).unwrap()));
}

fn training(c: &mut Criterion) {
    let params = ModelParameters::init(BackboneConfig::toy(0)).unwrap();
    let contents = synthetic::generate(4, &[1.0, 2.0, 3.0, 4.0], 32, 0);
    let set = build_training_set(&synthetic::triplets(&contents), |id| Ok(synthetic::find(&contents, id).unwrap().clone())).unwrap();
    let batch = &set.triplets[..16];
    let frozen_cache = HashMap::new();
    c.bench_function("loss_and_gradients_16x32px_all_groups", |b| {
        b.iter(|| loss_and_gradients(&params, &set.images, black_box(batch), ParamMask::all(), Objective::Full, &frozen_cache).unwrap())
    });
}

criterion_group!(benches, scoring, training);
criterion_main!(benches);
