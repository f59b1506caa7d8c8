//! Benchmark fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use velc_core::{ModelConfig, Tensor, VelcModel};

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("matching shape")
}

/// A model over series of length `t` and a `[batch × t]` input in `[0, 1]`.
pub fn model_and_batch(t: usize, hidden: usize, batch: usize) -> (VelcModel, Tensor) {
    let mut cfg = ModelConfig::new(t);
    cfg.hidden = hidden;
    let model = VelcModel::new(cfg, 0).expect("valid config");
    let x = random_tensor(batch, t, 1).map(|v| 0.5 + 0.5 * v);
    (model, x)
}
