//! Fixtures shared by the kernel benchmarks.

use horst::layer::{HorstLayer, LayerConfig};
use horst::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random query, keys, values and the two filter kernels for one `st_att` call.
pub struct AttentionInputs {
    pub query: Tensor,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub theta_q: Tensor,
    pub theta_k: Tensor,
}

pub fn attention_inputs(channels: usize, hw: usize, order: usize, seed: u64) -> AttentionInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [channels, hw, hw];
    AttentionInputs {
        query: Tensor::uniform(&shape, 1.0, &mut rng),
        keys: (0..order)
            .map(|_| Tensor::uniform(&shape, 1.0, &mut rng))
            .collect(),
        values: (0..order)
            .map(|_| Tensor::uniform(&shape, 1.0, &mut rng))
            .collect(),
        theta_q: Tensor::uniform(&[1, 2, 3, 3], 0.1, &mut rng),
        theta_k: Tensor::uniform(&[1, 2, 3, 3], 0.1, &mut rng),
    }
}

/// A layer and `frames` random inputs of shape `channels x hw x hw`.
pub fn layer_and_inputs(
    channels: usize,
    hw: usize,
    order: usize,
    frames: usize,
    seed: u64,
) -> (HorstLayer, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = HorstLayer::new(LayerConfig::new(channels, channels, order), &mut rng)
        .expect("valid layer config");
    let inputs = (0..frames)
        .map(|_| Tensor::uniform(&[channels, hw, hw], 1.0, &mut rng))
        .collect();
    (layer, inputs)
}
