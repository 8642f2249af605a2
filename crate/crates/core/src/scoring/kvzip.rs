use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompt::RepeatPromptSpec;
use super::tensor::{aggregate_head, HeadScore, ScoreMethod, ScoreTensor};
use crate::error::{contract, Error, Result};
use crate::kvcache::KvCache;
use crate::tensor::dot;
use crate::tinylm::{Model, Role, TokenSeq};

/// Whether cross-attention scores are normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Softmax,
    /// Raw scaled query-key products, no normalisation.
    Logit,
}

impl ScoreMode {
    pub fn method(self) -> ScoreMethod {
        match self {
            ScoreMode::Softmax => ScoreMethod::Kvzip,
            ScoreMode::Logit => ScoreMethod::KvzipLogit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvzipOptions {
    pub chunk_size: usize,
    pub prompt: RepeatPromptSpec,
    pub mode: ScoreMode,
}

/// Chunk size for contexts of a few hundred tokens.
pub const DEFAULT_CHUNK_SIZE: usize = 64;

impl Default for KvzipOptions {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            prompt: RepeatPromptSpec::standard(),
            mode: ScoreMode::Softmax,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScoreOutput {
    pub scores: ScoreTensor,
    pub head: HeadScore,
    /// Instrumented attention work of every forward pass the scorer ran,
    /// in half-pair units summed over layers and query heads.
    pub attention_half_pairs: u64,
}

impl ScoreOutput {
    pub(crate) fn new(scores: ScoreTensor, attention_half_pairs: u64) -> Self {
        let head = aggregate_head(&scores);
        Self {
            scores,
            head,
            attention_half_pairs,
        }
    }
}

/// Chunk boundaries `[t·m, min((t+1)·m, n))`.
pub fn chunk_ranges(n: usize, m: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(m)).map(|t| t * m..((t + 1) * m).min(n)).collect()
}

/// Reconstruction scoring: each chunk of the context is re-fed after the
/// repeat prompt on top of the full prefilled cache, and a cached pair scores
/// the largest attention any reconstruction query of its group pays it.
pub fn score_kvzip(model: &Model, cache: &KvCache, context: &TokenSeq, opts: &KvzipOptions) -> Result<ScoreOutput> {
    if opts.chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    check_cache(model, cache, context)?;
    let n = context.len();
    let ranges = chunk_ranges(n, opts.chunk_size);
    let parts: Vec<(Vec<Vec<f32>>, u64)> = ranges
        .par_iter()
        .map(|r| {
            let mut input = opts.prompt.render(&context.tokens, r.start);
            input.extend_from_slice(&context.tokens[r.clone()]);
            score_span(model, cache, input, r.clone(), opts.mode)
        })
        .collect::<Result<_>>()?;

    let dims = model.config().cache_dims();
    let mut scores = ScoreTensor::new(dims.n_layers, dims.n_kv_heads, n, opts.mode.method());
    scores.chunk_size = Some(opts.chunk_size);
    let mut writes = vec![0u8; n];
    let mut half_pairs = 0;
    for (r, (rows, hp)) in ranges.iter().zip(parts) {
        for (lh, row) in rows.iter().enumerate() {
            scores.row_mut(lh / dims.n_kv_heads, lh % dims.n_kv_heads)[r.clone()].copy_from_slice(row);
        }
        for w in &mut writes[r.clone()] {
            *w += 1;
        }
        half_pairs += hp;
    }
    if let Some(p) = writes.iter().position(|&w| w != 1) {
        return Err(contract(format!("score position {p} written {} times", writes[p])));
    }
    Ok(ScoreOutput::new(scores, half_pairs))
}

/// Single-pass form: the whole context is reconstructed after the first-chunk
/// prompt and each query attends over every cached key.
pub fn score_kvzip_unchunked(
    model: &Model,
    cache: &KvCache,
    context: &TokenSeq,
    prompt: &RepeatPromptSpec,
    mode: ScoreMode,
) -> Result<ScoreOutput> {
    check_cache(model, cache, context)?;
    let n = context.len();
    let mut input = prompt.render(&context.tokens, 0);
    input.extend_from_slice(&context.tokens);
    let (rows, hp) = score_span(model, cache, input, 0..n, mode)?;
    let dims = model.config().cache_dims();
    let mut scores = ScoreTensor::from_vec(dims.n_layers, dims.n_kv_heads, n, rows.concat(), mode.method())
        .expect("one row per head");
    scores.chunk_size = Some(n);
    Ok(ScoreOutput::new(scores, hp))
}

fn check_cache(model: &Model, cache: &KvCache, context: &TokenSeq) -> Result<()> {
    if cache.dims() != model.config().cache_dims() {
        return Err(contract("cache dims do not match model"));
    }
    if cache.len() != context.len() {
        return Err(contract(format!(
            "cache holds {} positions but context has {} tokens",
            cache.len(),
            context.len()
        )));
    }
    cache.validate()
}

/// Forward `input` after the full cache and score the cached keys in `span`.
/// Returns one row of `span.len()` scores per `(layer, kv_head)`.
fn score_span(
    model: &Model,
    cache: &KvCache,
    input: Vec<u32>,
    span: Range<usize>,
    mode: ScoreMode,
) -> Result<(Vec<Vec<f32>>, u64)> {
    let cfg = model.config();
    let (d, g_size) = (cfg.head_dim, cfg.group_size);
    let n_c = cache.len();
    let n_in = input.len();
    let mut store = cache.clone();
    let out = model.forward_into(&TokenSeq::with_role(input, Role::Prompt), &mut store, true)?;
    let captured = out.captured.expect("capture requested");
    let scale = 1.0 / (d as f32).sqrt();

    let mut rows = Vec::with_capacity(cfg.n_layers * cfg.n_kv_heads);
    let mut logits = vec![0.0f32; span.len() + n_in];
    for layer in &captured {
        for (qs, keys) in layer.queries.iter().zip(&layer.keys) {
            let mut row = vec![f32::NEG_INFINITY; span.len()];
            for g in 0..g_size {
                for i in 0..n_in {
                    let q = &qs[(g * n_in + i) * d..(g * n_in + i + 1) * d];
                    let visible = span.len() + i + 1;
                    for (c, slot) in span.clone().zip(&mut logits) {
                        *slot = dot(q, &keys[c * d..(c + 1) * d]) * scale;
                    }
                    for j in 0..=i {
                        let k = &keys[(n_c + j) * d..(n_c + j + 1) * d];
                        logits[span.len() + j] = dot(q, k) * scale;
                    }
                    let lg = &logits[..visible];
                    match mode {
                        ScoreMode::Logit => {
                            for (r, &v) in row.iter_mut().zip(lg) {
                                *r = r.max(v);
                            }
                        }
                        ScoreMode::Softmax => {
                            let mx = lg.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                            let sum: f32 = lg.iter().map(|&v| (v - mx).exp()).sum();
                            for (r, &v) in row.iter_mut().zip(lg) {
                                *r = r.max((v - mx).exp() / sum);
                            }
                        }
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok((rows, out.attention_half_pairs))
}
