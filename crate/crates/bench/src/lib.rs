//! Shared fixtures for the benchmarks.

use dire_core::{seed, EpsConfig, EpsModel, ImageShape, ImageTensor, NoiseSchedule};

/// Untrained ε-model with the given image size and width on the T=200 schedule.
pub fn eps_model(image_size: usize, width: usize) -> EpsModel {
    let cfg = EpsConfig {
        image_size,
        width,
        ..EpsConfig::default()
    };
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).expect("valid schedule");
    EpsModel::init(cfg, sched, 0).expect("valid config")
}

pub fn random_images(shape: ImageShape, n: usize) -> Vec<ImageTensor> {
    let mut rng = seed::rng(0, &[]);
    (0..n)
        .map(|_| ImageTensor::randn(shape, &mut rng).clamp(-1.0, 1.0))
        .collect()
}
