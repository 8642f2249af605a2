//! Reuse and chunk-size experiments on top of the evaluation primitives.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{compress, eval_queries, eval_repeat_accuracy, eval_reused, hits, query_accuracy, MethodSpec};
use super::task::TaskInstance;
use crate::error::{contract, Result};
use crate::eviction::BudgetMode;
use crate::kvcache::Provenance;
use crate::scoring::{score_snap_observed, score_with, RepeatPromptSpec, ScoreMethod, ScoringConfig};
use crate::tinylm::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseReport {
    pub ratio: f64,
    pub instances: usize,
    /// Later queries answered from the query-agnostic cache.
    pub kvzip: f64,
    /// Later queries answered from a cache compressed for the first query.
    pub snap_reused: f64,
    /// First query answered from the cache compressed for it.
    pub snap_first: f64,
}

/// Compress once per context and answer the follow-up queries: reconstruction
/// scoring versus an observation window placed on the first query.
pub fn reuse_experiment(
    model: &Model,
    instances: &[TaskInstance],
    ratio: f64,
    kvzip: &ScoringConfig,
    kernel: usize,
) -> Result<ReuseReport> {
    if instances.iter().any(|i| i.queries.len() < 2) {
        return Err(contract("reuse experiment needs at least two queries per context"));
    }
    let method = MethodSpec::new(kvzip.clone(), BudgetMode::Nonuniform);
    let snap_method = MethodSpec::new(ScoringConfig::new(ScoreMethod::SnapWindow), BudgetMode::Nonuniform);
    let per: Vec<(f64, f64, f64)> = instances
        .par_iter()
        .map(|inst| {
            let cache = model.prefill(&inst.context)?;
            let (first, later) = inst.queries.split_first().expect("checked above");

            let scores = score_with(model, &cache, &inst.context, kvzip)?;
            let agnostic = compress(&cache, &scores, &method, ratio)?;
            let a = eval_queries(model, &agnostic, later)?;

            let observed = score_snap_observed(model, &inst.context, &first.prompt, kernel)?;
            let aware = compress(&cache, &observed, &snap_method, ratio)?.with_provenance(Provenance {
                method: "snap-window/query-1".into(),
                observed_query: Some(first.prompt.tokens.clone()),
            });
            let b = eval_reused(model, &aware, later)?;
            let c = query_accuracy(model, &aware, std::slice::from_ref(first))?;
            Ok((a, b, c))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok(ReuseReport {
        ratio,
        instances: per.len(),
        kvzip: per.iter().map(|p| p.0).sum::<f64>() / n,
        snap_reused: per.iter().map(|p| p.1).sum::<f64>() / n,
        snap_first: per.iter().map(|p| p.2).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSweepRow {
    pub chunk_size: usize,
    pub ratio: f64,
    pub accuracy: f64,
    pub repeat_accuracy: f64,
}

/// Query accuracy of reconstruction scoring at one ratio for several chunk
/// sizes.
pub fn chunk_sweep(
    model: &Model,
    instances: &[TaskInstance],
    chunk_sizes: &[usize],
    ratio: f64,
    mode: BudgetMode,
) -> Result<Vec<ChunkSweepRow>> {
    let prompt = RepeatPromptSpec::standard();
    chunk_sizes
        .iter()
        .map(|&m| {
            let method = MethodSpec::new(
                ScoringConfig {
                    chunk_size: m,
                    ..ScoringConfig::new(ScoreMethod::Kvzip)
                },
                mode,
            );
            let per: Vec<(usize, usize, f64)> = instances
                .par_iter()
                .map(|inst| {
                    let cache = model.prefill(&inst.context)?;
                    let scores = score_with(model, &cache, &inst.context, &method.scoring)?;
                    let c = compress(&cache, &scores, &method, ratio)?;
                    let h = hits(model, &c, &inst.queries)?;
                    Ok((
                        h,
                        inst.queries.len(),
                        eval_repeat_accuracy(model, &c, &inst.context, &prompt)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let asked: usize = per.iter().map(|p| p.1).sum();
            Ok(ChunkSweepRow {
                chunk_size: m,
                ratio,
                accuracy: per.iter().map(|p| p.0).sum::<usize>() as f64 / asked.max(1) as f64,
                repeat_accuracy: per.iter().map(|p| p.2).sum::<f64>() / per.len().max(1) as f64,
            })
        })
        .collect()
}
