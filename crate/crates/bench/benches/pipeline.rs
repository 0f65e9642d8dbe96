use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stillsplat_bench::{bench_camera, bench_cloud};
use stillsplat_core::grid::{ImageRgb, ImageScalar};
use stillsplat_core::losses;
use stillsplat_core::rasterizer::{render, render_backward, RenderConfig};
use stillsplat_core::synth::oracle_render;

fn random_image(seed: u64, size: usize) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageRgb::new(size, size, [0.0; 3]);
    for v in img.data_mut() {
        *v = [rng.gen(), rng.gen(), rng.gen()];
    }
    img
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_forward");
    let cfg = RenderConfig::default();
    for &count in &[200usize, 1000, 5000] {
        let cam = bench_camera(64);
        let cloud = bench_cloud(1, count, 0);
        group.bench_with_input(BenchmarkId::from_parameter(count), &count, |b, _| {
            b.iter(|| render(&cloud, &cam, [0.0; 3], &cfg).unwrap());
        });
    }
    group.finish();
}

fn bench_forward_vs_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("renderer_kind_200");
    let cfg = RenderConfig::default();
    let cam = bench_camera(64);
    let cloud = bench_cloud(2, 200, 0);
    group.bench_function("tiled", |b| {
        b.iter(|| render(&cloud, &cam, [0.0; 3], &cfg).unwrap())
    });
    group.bench_function("oracle", |b| {
        b.iter(|| oracle_render(&cloud, &cam, [0.0; 3], &cfg))
    });
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_backward");
    let cfg = RenderConfig::default();
    for &count in &[200usize, 1000] {
        let cam = bench_camera(64);
        let cloud = bench_cloud(3, count, 2);
        let upstream = random_image(9, 64);
        group.bench_with_input(BenchmarkId::from_parameter(count), &count, |b, _| {
            b.iter(|| render_backward(&cloud, &cam, [0.0; 3], &upstream, &cfg).unwrap());
        });
    }
    group.finish();
}

fn bench_ssim(c: &mut Criterion) {
    let a = random_image(4, 64);
    let b_img = random_image(5, 64);
    let w = ImageScalar::new(64, 64, 1.0);
    c.bench_function("dssim_64x64_win11", |b| {
        b.iter(|| losses::dssim_loss(&a, &b_img, &w, 11, 1e-4, 9e-4).unwrap())
    });
    c.bench_function("dssim_grad_64x64_win11", |b| {
        b.iter(|| losses::dssim_loss_grad(&a, &b_img, &w, 11, 1e-4, 9e-4).unwrap())
    });
}

fn bench_propagation_sweep(c: &mut Criterion) {
    use stillsplat_core::propagation::{propagate_stage, PropagationConfig, StageView};
    use stillsplat_core::synth::{planar_cloud, planar_fixture};

    let scene = planar_fixture(3, 48, 48);
    let ds = scene.generate().unwrap();
    let cloud = planar_cloud(&scene.statics[0], 0.06, 0.9);
    let cfg = PropagationConfig {
        patch_size: 7,
        sweeps: 1,
        ..PropagationConfig::default()
    };
    let views: Vec<StageView<'_>> = ds
        .cameras
        .iter()
        .zip(ds.frames.iter())
        .map(|(camera, image)| StageView {
            camera,
            image,
            mask: None,
        })
        .collect();
    c.bench_function("propagate_stage_3view_48px", |b| {
        b.iter(|| {
            propagate_stage(
                &cloud,
                &views,
                &cfg,
                &RenderConfig::default(),
                scene.background,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_forward_vs_oracle,
    bench_backward,
    bench_ssim,
    bench_propagation_sweep
);
criterion_main!(benches);
