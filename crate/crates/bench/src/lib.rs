//! Shared fixtures for the criterion benchmarks.

use msstnet_core::{ModelConfig, Msstnet, Rng, Tensor};

/// Model and a uniform random clip matching its configuration.
pub fn model_and_clip(config: ModelConfig, seed: u64) -> (Msstnet, Tensor) {
    let (h, w) = config.backbone.input_size;
    let shape = [config.frames, config.backbone.in_channels, h, w];
    let model = Msstnet::new(config).expect("valid benchmark config");
    let clip = Rng::new(seed).uniform_tensor(&shape, 0.0, 1.0);
    (model, clip)
}
