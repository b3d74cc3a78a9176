//! Shared fixtures for the criterion benchmarks.

use adgen_core::experiment::{World, WorldConfig};

/// A small default-shaped world, cheap enough to build once per bench run.
pub fn bench_world() -> World {
    World::build(&WorldConfig {
        products: 64,
        ..WorldConfig::default()
    })
    .expect("default bench world is valid")
}
