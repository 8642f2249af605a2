use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Standard deviation of the initial weight distribution.
pub const INIT_GAIN: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// `hidden × hidden`, query heads ordered `kv_head · group + g`.
    pub wq: Vec<f32>,
    /// `hidden × kv_dim`
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

/// All parameters, stored `in × out` row-major so activations multiply on
/// the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<f32>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (hd, kv, ff, v) = (cfg.hidden_dim, cfg.kv_dim(), cfg.ffn_dim(), cfg.vocab_size);
        let layer = LayerWeights {
            attn_norm: vec![0.0; hd],
            wq: vec![0.0; hd * hd],
            wk: vec![0.0; hd * kv],
            wv: vec![0.0; hd * kv],
            wo: vec![0.0; hd * hd],
            mlp_norm: vec![0.0; hd],
            w_gate: vec![0.0; hd * ff],
            w_up: vec![0.0; hd * ff],
            w_down: vec![0.0; ff * hd],
        };
        Self {
            embed: vec![0.0; v * hd],
            layers: vec![layer; cfg.n_layers],
            final_norm: vec![0.0; hd],
            lm_head: vec![0.0; hd * v],
        }
    }

    /// Tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// True for RMS-norm gains, which initialise to one.
    pub fn is_norm_tensor(index: usize, n_layers: usize) -> bool {
        let last = 1 + 9 * n_layers;
        index == last || (index >= 1 && index < last && matches!((index - 1) % 9, 0 | 5))
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// A toy pre-norm GQA transformer with rotary positions and a SiLU-gated
/// MLP. Immutable once built; the forward pass only reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) weights: Weights,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let want = Weights::zeros(&config);
        let shapes_match = want
            .tensors()
            .iter()
            .zip(weights.tensors())
            .all(|(a, b)| a.len() == b.len())
            && want.layers.len() == weights.layers.len();
        if !shapes_match {
            return Err(Error::Config("weight shapes do not match config".into()));
        }
        if !weights.all_finite() {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn checksum(&self) -> u64 {
        self.weights.checksum()
    }
}

/// Deterministically initialise a model: normal(0, 0.02) matrices, unit norm
/// gains, drawn from a ChaCha stream keyed by the config seed.
pub fn init_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut weights = Weights::zeros(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed as u64);
    let normal = Normal::new(0.0f32, INIT_GAIN).expect("valid normal");
    for (i, t) in weights.tensors_mut().into_iter().enumerate() {
        if Weights::is_norm_tensor(i, config.n_layers) {
            t.fill(1.0);
        } else {
            for x in t.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
    }
    Ok(Model { config, weights })
}
