//! Ready-made configurations for the 4-verb early-recognition task.

use crate::data::{TaskSpec, NUM_NOUNS, NUM_VERBS};
use crate::layer::{AttentionMode, LayerConfig, RoutingMode};
use crate::network::{HeadMode, LossWeights, NetworkConfig, StemSpec};
use crate::train::{Target, TrainConfig};

/// 32x32 single-channel clips of 16 frames, first quarter observed, noise
/// 0.1, 2000 train and 500 test samples.
pub fn verb_task(seed: u64) -> TaskSpec {
    TaskSpec {
        seed,
        ..TaskSpec::default()
    }
}

/// Stride-2 stem to 16x16, then three order-8 layers of 8 channels, each
/// halving the resolution (top map 2x2). Only the action head is built and
/// it is trained on the verb label.
pub fn verb_network(mode: AttentionMode, routing: RoutingMode) -> NetworkConfig {
    let c = 8;
    NetworkConfig {
        input_channels: 1,
        input_center: 0.5,
        stem: vec![StemSpec {
            channels: c,
            stride: 2,
        }],
        layers: (0..3)
            .map(|_| {
                LayerConfig::new(c, c, 8)
                    .with_stride(2)
                    .with_mode(mode)
                    .with_routing(routing)
            })
            .collect(),
        head: HeadMode::SingleLabel,
        num_verbs: NUM_VERBS,
        num_nouns: NUM_NOUNS,
        num_actions: NUM_VERBS,
        loss_weights: LossWeights::default(),
        head_conv: false,
    }
}

pub fn verb_training(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        epochs,
        batch_size: 8,
        seed,
        target: Target::Verb,
        ..TrainConfig::default()
    }
}
