//! Shared scene builders for the pipeline benchmarks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stillsplat_core::gauss::{Camera, GaussianCloud, GaussianPoint};
use stillsplat_core::synth::look_at_camera;

pub fn bench_camera(size: usize) -> Camera {
    look_at_camera(
        Vector3::new(0.0, 0.3, -2.2),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        0.9 * size as f64,
        0.9 * size as f64,
        size,
        size,
    )
    .expect("valid benchmark camera")
}

pub fn bench_cloud(seed: u64, count: usize, degree: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..count)
        .map(|_| {
            let mut g = GaussianPoint::isotropic(
                Vector3::new(
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                ),
                rng.gen_range(0.02..0.1),
                rng.gen_range(0.2..0.8),
                [rng.gen(), rng.gen(), rng.gen()],
            );
            g.rotation = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            g
        })
        .collect();
    GaussianCloud::from_points(points, degree)
}
