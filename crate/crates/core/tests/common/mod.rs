#![allow(dead_code)]

use csm_core::image_encoder::{InitScheme, LayerSpec, NetworkSpec};
use csm_core::objective::NormScope;
use csm_core::synthgen::{generate_dataset, GenerationConfig, SyntheticDataset};
use csm_core::trainer::TrainerConfig;

pub fn small_dataset(seed: u64) -> SyntheticDataset {
    let config = GenerationConfig {
        num_concepts: 4,
        num_images: 48,
        num_queries: 80,
        image_size: 16,
        judged_pool_size: 24,
        ..GenerationConfig::default()
    };
    generate_dataset(&config, seed).unwrap()
}

pub fn tiny_network(image_size: usize, dim: usize) -> NetworkSpec {
    NetworkSpec {
        input_shape: [3, image_size, image_size],
        layers: vec![LayerSpec::conv(4, 3, 1), LayerSpec::pool(2, 2), LayerSpec::fc(dim, false)],
    }
}

pub fn small_trainer(image_size: usize) -> TrainerConfig {
    TrainerConfig {
        batch_size_queries: 16,
        max_epochs: 3,
        network: Some(tiny_network(image_size, 6)),
        init: InitScheme::He,
        norm_scope: NormScope::PerLayer,
        norm_radius: 5.0,
        word_init_std: 0.1,
        seed: 3,
        ..TrainerConfig::default()
    }
}
