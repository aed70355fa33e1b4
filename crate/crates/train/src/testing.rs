use crossmlp_autograd::Scalar;
use crossmlp_data::{render_toy, sample::prepare, Batch, LoadOptions};

use crate::config::RunConfig;

/// 32x32 model small enough for per-test training steps.
pub(crate) fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.image_size = 32;
    c.model.base_channels = 4;
    c.model.blocks = 1;
    c.model.mixer_layers = 1;
    c.model.disc_filters = 4;
    c.model.selection_width = 4;
    c.train.batch_size = 2;
    c
}

/// `n` rendered toy samples, no files involved.
pub(crate) fn toy_batch<T: Scalar>(n: usize, seed: u64) -> Batch<T> {
    let samples: Vec<_> = (0..n)
        .map(|i| prepare(&format!("s{i}"), &render_toy(i, 32, 4, seed), &LoadOptions::new(32, 4), None).unwrap())
        .collect();
    Batch::stack(&samples).unwrap()
}
