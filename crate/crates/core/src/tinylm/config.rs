use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::CacheDims;

/// Architecture hyperparameters of the toy GQA transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// Query heads sharing one KV head.
    pub group_size: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    /// Always `n_kv_heads · group_size · head_dim`.
    pub hidden_dim: usize,
    pub seed: u32,
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_kv_heads: usize,
        group_size: usize,
        head_dim: usize,
        vocab_size: usize,
        max_position: usize,
        seed: u32,
    ) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            group_size,
            head_dim,
            vocab_size,
            max_position,
            hidden_dim: n_kv_heads * group_size * head_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("n_layers", self.n_layers),
            ("n_kv_heads", self.n_kv_heads),
            ("group_size", self.group_size),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        let want = self.n_kv_heads * self.group_size * self.head_dim;
        if self.hidden_dim != want {
            return Err(Error::Config(format!(
                "hidden_dim {} != n_kv_heads·group_size·head_dim = {want}",
                self.hidden_dim
            )));
        }
        if u32::try_from(self.max_position).is_err() || u32::try_from(self.vocab_size).is_err() {
            return Err(Error::Config("dimensions must fit in 32 bits".into()));
        }
        Ok(())
    }

    pub fn n_query_heads(&self) -> usize {
        self.n_kv_heads * self.group_size
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Width of the gated MLP.
    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn cache_dims(&self) -> CacheDims {
        CacheDims {
            n_layers: self.n_layers,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
        }
    }

    /// The fields in checkpoint order.
    pub(crate) fn to_words(self) -> [usize; 8] {
        [
            self.n_layers,
            self.n_kv_heads,
            self.group_size,
            self.head_dim,
            self.vocab_size,
            self.max_position,
            self.hidden_dim,
            self.seed as usize,
        ]
    }

    pub(crate) fn from_words(w: [u32; 8]) -> Self {
        let u = |i: usize| w[i] as usize;
        Self {
            n_layers: u(0),
            n_kv_heads: u(1),
            group_size: u(2),
            head_dim: u(3),
            vocab_size: u(4),
            max_position: u(5),
            hidden_dim: u(6),
            seed: w[7],
        }
    }
}
