//! Shared fixture builders for the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sslab_core::tensor::Tensor;

/// Deterministic Gaussian tensor so every benchmark run sees identical inputs.
pub fn fixture(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}
