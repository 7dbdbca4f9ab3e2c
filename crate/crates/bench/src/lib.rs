//! Shared inputs for the criterion benches.

use pean::charset::NUM_CLASSES;
use pean::data::{LR_H, LR_W};
use pean::nn::{Graph, Tensor};
use pean::SEQ_LEN;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random LR batch in `[0,1]`.
pub fn lr_batch(b: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[b, LR_H, LR_W, 3], 0.0, 1.0, &mut rng(seed))
}

/// Row-stochastic prior `[B, L, A]`.
pub fn prior(b: usize, seed: u64) -> Tensor<f32> {
    let g = Graph::<f32>::detached(false);
    let t = g.constant(Tensor::randn(&[b, SEQ_LEN, NUM_CLASSES], &mut rng(seed)).scale(2.0)).softmax();
    (*t.value()).clone()
}
