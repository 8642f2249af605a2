use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eviction::{ceil_count, BudgetMode, BudgetSpec};
use crate::kvcache::CacheDims;
use crate::scoring::{flops_scoring, FlopReport, RepeatPromptSpec};

/// Cost model for one context under non-uniform eviction at `ratio`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub n_c: usize,
    pub ratio: f64,
    pub flops: FlopReport,
    pub full_pairs: usize,
    pub kept_pairs: usize,
    /// Decode attention work per generated token relative to the full cache.
    pub decode_attention_ratio: f64,
    pub full_cache_bytes: usize,
    pub cache_bytes: usize,
}

pub fn efficiency_report(
    dims: CacheDims,
    n_c: usize,
    m: usize,
    ratio: f64,
    prompt: &RepeatPromptSpec,
) -> Result<EfficiencyReport> {
    BudgetSpec::new(ratio, BudgetMode::Nonuniform).validate()?;
    let flops = flops_scoring(n_c, m, prompt)?;
    let per_layer = dims.n_kv_heads * n_c;
    let full_pairs = dims.n_layers * per_layer;
    let kept_pairs = dims.n_layers * ceil_count(ratio, per_layer);
    let pair_bytes = 2 * dims.head_dim * 4;
    Ok(EfficiencyReport {
        n_c,
        ratio,
        flops,
        full_pairs,
        kept_pairs,
        decode_attention_ratio: kept_pairs as f64 / full_pairs as f64,
        full_cache_bytes: full_pairs * pair_bytes,
        cache_bytes: kept_pairs * pair_bytes,
    })
}
