//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rosa_core::attacks::PretrainViews;
use rosa_core::bounds::{random_world, DiscreteWorld, WorldSpec};
use rosa_core::models::{Encoder, InitScheme};
use rosa_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Rows scaled to unit norm.
pub fn unit_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(seed, rows, cols);
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// A default-size encoder with two views of a random batch.
pub fn pretrain_batch(seed: u64, batch: usize) -> (Encoder, PretrainViews) {
    let enc = Encoder::init(&mut rng(seed), 8, InitScheme::UniformHe);
    let views = PretrainViews {
        anchors: uniform(seed + 1, batch, 8),
        positives: uniform(seed + 2, batch, 8),
    };
    (enc, views)
}

/// A world with exactly `atoms` atoms.
pub fn world(seed: u64, atoms: usize) -> DiscreteWorld {
    let spec = WorldSpec {
        min_atoms: atoms,
        max_atoms: atoms,
        ..WorldSpec::default()
    };
    random_world(&mut rng(seed), &spec)
}
