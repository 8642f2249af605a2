//! The pinned training configuration used by the CLI defaults and the
//! end-to-end checks.

use super::task::{TaskSpec, TrainingMix};
use crate::tinylm::{ModelConfig, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_position: usize,
}

pub const PINNED_MODEL: ModelShape = ModelShape {
    n_layers: 2,
    n_kv_heads: 2,
    group_size: 2,
    head_dim: 16,
    vocab_size: 96,
    max_position: 160,
};

pub const PINNED_PAIRS: usize = 8;
pub const PINNED_SEED: u32 = 1;

#[derive(Clone, Debug)]
pub struct Recipe {
    pub config: ModelConfig,
    pub mix: TrainingMix,
    pub options: TrainOptions,
}

pub fn pinned_recipe() -> Recipe {
    let s = PINNED_MODEL;
    let config = ModelConfig::new(
        s.n_layers,
        s.n_kv_heads,
        s.group_size,
        s.head_dim,
        s.vocab_size,
        s.max_position,
        PINNED_SEED,
    );
    Recipe {
        config,
        mix: TrainingMix::new(TaskSpec::lookup(PINNED_PAIRS, s.vocab_size, 0)),
        options: TrainOptions {
            steps: 6000,
            lr: 3e-3,
            seed: PINNED_SEED as u64,
            batch_size: 16,
            warmup_steps: 100,
            grad_clip: 1.0,
        },
    }
}
