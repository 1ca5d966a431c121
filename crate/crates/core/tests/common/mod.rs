#![allow(dead_code)]

pub mod grad;

use fpt::adapter::{FptConfig, Selection, SelectedFeatures};
use fpt::tensor::{init, Tensor};
use fpt::vit::ViT;

/// 32×32 LPM input, 16×16 side input, two LPM layers, two side layers.
pub fn toy() -> FptConfig {
    FptConfig {
        high_res: 32,
        low_res: 16,
        patch_size: 8,
        channels: 3,
        lpm_layers: 2,
        lpm_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        side_layers: 2,
        reduction: 2,
        prompts: 3,
        token_ratio: 0.25,
        classes: 2,
        selection: Selection::Important,
        selection_seed: 0,
        fusion: true,
    }
}

pub fn image(res: usize, channels: usize, seed: u64) -> Tensor {
    init::uniform(&[res, res, channels], -1.0, 1.0, &mut init::rng_for(seed, "test-image"))
}

pub fn features(lpm: &ViT, cfg: &FptConfig, seed: u64) -> Vec<SelectedFeatures> {
    fpt::cache::extract(lpm, cfg, &format!("img{seed}"), &image(cfg.high_res, cfg.channels, seed)).unwrap()
}
