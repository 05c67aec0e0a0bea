//! Shared fixtures for the criterion benchmarks.

use limn_core::encoders::ImageEncoderConfig;
use limn_core::matcher::TransformerConfig;
use limn_core::synthio::{make_triplets, Triplet, World};
use limn_core::{LimnConfig, TrainConfig};

/// A small world and triplet set sized for stable micro-benchmarks.
pub fn bench_world(seed: u64) -> (World, Vec<Triplet>) {
    let world = World::generate(80, 5, 0.05, seed).expect("bench world");
    let triplets =
        make_triplets(&world.items, &world.slots, &world.vocab, 128, 3, seed).expect("triplets");
    (world, triplets)
}

/// Desk-scale model dimensions on the bench world.
pub fn bench_train_config(world: &World, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_default(world.vocab.len(), seed);
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.model = LimnConfig::desk_default(world.vocab.len());
    cfg.model.image = ImageEncoderConfig::new(3, 8, 8, 4, 4, 32).expect("image config");
    cfg.model.transformer = TransformerConfig::new(2, 4, 32).expect("transformer config");
    cfg
}
