//! Query-agnostic evaluation of compressed caches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{Query, TaskInstance, TaskSpec};
use crate::error::{contract, Result};
use crate::eviction::{allocate, BudgetMode, BudgetSpec};
use crate::kvcache::{apply_mask, CompressedCache, KvCache, KvStore, Provenance};
use crate::scoring::{prefill_half_pairs, score_with, HeadScore, RepeatPromptSpec, ScoreOutput, ScoringConfig};
use crate::tensor::argmax;
use crate::tinylm::{Model, TokenSeq};

/// Teacher-forced accuracy of reproducing `context` after the repeat prompt,
/// on top of `cache` (full or compressed).
pub fn eval_repeat_accuracy<S: KvStore + Clone>(
    model: &Model,
    cache: &S,
    context: &TokenSeq,
    prompt: &RepeatPromptSpec,
) -> Result<f64> {
    if cache.next_position() != context.len() {
        return Err(contract("cache was not built from this context"));
    }
    if context.is_empty() {
        return Ok(1.0);
    }
    let lead = prompt.render(&context.tokens, 0);
    if lead.is_empty() {
        return Err(contract("repeat prompt must be non-empty"));
    }
    let mut input = lead.clone();
    input.extend_from_slice(&context.tokens[..context.len() - 1]);
    let mut store = cache.clone();
    let out = model.forward_into(&TokenSeq::new(input), &mut store, false)?;
    let vocab = model.config().vocab_size;
    let hits = context
        .tokens
        .iter()
        .enumerate()
        .filter(|&(j, &t)| argmax(out.logits_row(lead.len() - 1 + j, vocab)) as u32 == t)
        .count();
    Ok(hits as f64 / context.len() as f64)
}

/// Exact-match accuracy of greedy answers, no protocol checks.
pub fn query_accuracy<S: KvStore + Clone + Sync>(model: &Model, cache: &S, queries: &[Query]) -> Result<f64> {
    Ok(ratio_of(hits(model, cache, queries)?, queries.len()))
}

/// Mean exact match over `queries` on a cache compressed without seeing any
/// query.
pub fn eval_queries(model: &Model, cache: &CompressedCache, queries: &[Query]) -> Result<f64> {
    if cache.provenance().observed_query.is_some() {
        return Err(contract("query-agnostic evaluation got a query-aware cache"));
    }
    query_accuracy(model, cache, queries)
}

/// Like [`eval_queries`] but accepts a cache compressed while serving an
/// earlier query, provided none of `queries` is that query.
pub fn eval_reused(model: &Model, cache: &CompressedCache, queries: &[Query]) -> Result<f64> {
    if let Some(seen) = &cache.provenance().observed_query {
        if queries.iter().any(|q| &q.prompt.tokens == seen) {
            return Err(contract(
                "reuse evaluation asked the query the cache was compressed for",
            ));
        }
    }
    query_accuracy(model, cache, queries)
}

/// One scorer plus budget structure. `head_scores` pins a static head ranking
/// for head-level mode; without it the per-context maxima are used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub scoring: ScoringConfig,
    pub budget: BudgetSpec,
    pub head_scores: Option<HeadScore>,
}

impl MethodSpec {
    pub fn new(scoring: ScoringConfig, mode: BudgetMode) -> Self {
        Self {
            scoring,
            budget: BudgetSpec::new(1.0, mode),
            head_scores: None,
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.scoring.method, self.budget.mode)
    }
}

/// Allocate at `ratio` from precomputed scores and gather the survivors.
pub fn compress(cache: &KvCache, scores: &ScoreOutput, method: &MethodSpec, ratio: f64) -> Result<CompressedCache> {
    let budget = BudgetSpec {
        ratio,
        ..method.budget.clone()
    };
    let mask = allocate(&scores.scores, method.head_scores.as_ref(), &budget, cache.roles())?;
    Ok(apply_mask(cache, &mask)?.with_provenance(Provenance {
        method: method.label(),
        observed_query: None,
    }))
}

pub const REPORT_SCHEMA: &str = "kvzip-eval/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: String,
    pub method: String,
    pub ratio: f64,
    pub accuracy: f64,
    pub full_accuracy: f64,
    pub repeat_accuracy: f64,
    pub kept_pairs: usize,
    pub total_pairs: usize,
    pub cache_ratio: f64,
    /// Attention work per query head in half-pair units, summed over
    /// instances.
    pub prefill_flops: u64,
    pub scoring_flops: u64,
    /// Decode-time attention work relative to the full cache.
    pub decode_attention_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub fingerprint: String,
    pub rows: Vec<CurveRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,method,ratio,accuracy,full_accuracy,repeat_accuracy,kept_pairs,total_pairs,cache_ratio,prefill_flops,scoring_flops,decode_attention_ratio\n",
        );
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.task,
                r.method,
                r.ratio,
                r.accuracy,
                r.full_accuracy,
                r.repeat_accuracy,
                r.kept_pairs,
                r.total_pairs,
                r.cache_ratio,
                r.prefill_flops,
                r.scoring_flops,
                r.decode_attention_ratio
            );
        }
        out
    }

    pub fn row(&self, task: &str, method: &str, ratio: f64) -> Option<&CurveRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.method == method && (r.ratio - ratio).abs() < 1e-12)
    }
}

/// A task family with its evaluation instances.
#[derive(Clone, Debug)]
pub struct TaskSet {
    pub name: String,
    pub spec: TaskSpec,
    pub instances: Vec<TaskInstance>,
}

impl TaskSet {
    pub fn generate(spec: &TaskSpec, count: usize) -> Result<Self> {
        Ok(Self {
            name: spec.kind.name().to_string(),
            spec: spec.clone(),
            instances: super::task::gen_tasks(spec, count)?,
        })
    }
}

struct Cell {
    hits: usize,
    asked: usize,
    repeat: f64,
    kept: usize,
    total: usize,
}

/// Accuracy for every `(task, method, ratio)` combination. Each context is
/// prefilled and scored once per method, then compressed at every ratio
/// before any query is decoded.
pub fn compression_curve(
    model: &Model,
    tasks: &[TaskSet],
    methods: &[MethodSpec],
    ratios: &[f64],
) -> Result<EvalReport> {
    let mut ratios = ratios.to_vec();
    for &r in &ratios {
        crate::eviction::BudgetSpec::new(r, BudgetMode::Nonuniform).validate()?;
    }
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let heads = (model.config().n_layers * model.config().n_query_heads()) as u64;
    let repeat_prompt = crate::scoring::RepeatPromptSpec::standard();

    let mut rows = Vec::new();
    for task in tasks {
        let prefills: Vec<KvCache> = task
            .instances
            .par_iter()
            .map(|inst| model.prefill(&inst.context))
            .collect::<Result<_>>()?;
        let full_hits: usize = task
            .instances
            .par_iter()
            .zip(&prefills)
            .map(|(inst, cache)| hits(model, cache, &inst.queries))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        let asked: usize = task.instances.iter().map(|i| i.queries.len()).sum();
        let full_accuracy = ratio_of(full_hits, asked);
        let prefill_flops: u64 = task.instances.iter().map(|i| prefill_half_pairs(i.context.len())).sum();

        for method in methods {
            let per_instance: Vec<(Vec<Cell>, u64)> = task
                .instances
                .par_iter()
                .zip(&prefills)
                .map(|(inst, cache)| {
                    let scores = score_with(model, cache, &inst.context, &method.scoring)?;
                    let cells = ratios
                        .iter()
                        .map(|&r| {
                            let c = compress(cache, &scores, method, r)?;
                            Ok(Cell {
                                hits: hits(model, &c, &inst.queries)?,
                                asked: inst.queries.len(),
                                repeat: eval_repeat_accuracy(model, &c, &inst.context, &repeat_prompt)?,
                                kept: c.kept_pairs(),
                                total: c.mask().total(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((cells, scores.attention_half_pairs / heads))
                })
                .collect::<Result<_>>()?;
            let scoring_flops = per_instance.iter().map(|(_, f)| f).sum();
            for (ri, &ratio) in ratios.iter().enumerate() {
                let cells = per_instance.iter().map(|(c, _)| &c[ri]);
                let (mut h, mut a, mut rep, mut kept, mut total) = (0, 0, 0.0, 0, 0);
                for c in cells {
                    h += c.hits;
                    a += c.asked;
                    rep += c.repeat;
                    kept += c.kept;
                    total += c.total;
                }
                let n = task.instances.len().max(1) as f64;
                rows.push(CurveRow {
                    task: task.name.clone(),
                    method: method.label(),
                    ratio,
                    accuracy: ratio_of(h, a),
                    full_accuracy,
                    repeat_accuracy: rep / n,
                    kept_pairs: kept,
                    total_pairs: total,
                    cache_ratio: ratio_of(kept, total),
                    prefill_flops,
                    scoring_flops,
                    decode_attention_ratio: ratio_of(kept, total),
                });
            }
        }
    }
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        fingerprint: fingerprint(model, tasks, methods, &ratios)?,
        rows,
    })
}

pub(crate) fn hits<S: KvStore + Clone + Sync>(model: &Model, cache: &S, queries: &[Query]) -> Result<usize> {
    queries
        .iter()
        .map(|q| Ok((model.decode_greedy(cache, &q.prompt, q.answer.len())?.tokens == q.answer) as usize))
        .sum()
}

fn ratio_of(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

fn fingerprint(model: &Model, tasks: &[TaskSet], methods: &[MethodSpec], ratios: &[f64]) -> Result<String> {
    let specs: Vec<(&str, &TaskSpec, usize)> = tasks
        .iter()
        .map(|t| (t.name.as_str(), &t.spec, t.instances.len()))
        .collect();
    let text = serde_json::to_string(&(model.checksum(), model.config(), specs, methods, ratios))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}
