//! Synthetic retrieval tasks standing in for long-context benchmarks.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::RepeatPromptSpec;
use crate::tinylm::{special, Role, SampleSource, TokenSeq, TrainingSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    LookupKv,
    Niah,
    MultiQueryLookup,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::LookupKv => "lookup-kv",
            TaskKind::Niah => "niah",
            TaskKind::MultiQueryLookup => "multi-query-lookup",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => TaskKind::Copy,
            "lookup-kv" | "lookup" => TaskKind::LookupKv,
            "niah" => TaskKind::Niah,
            "multi-query-lookup" | "mq-lookup" => TaskKind::MultiQueryLookup,
            other => return Err(Error::Config(format!("unknown task kind `{other}`"))),
        })
    }
}

/// How the content part of the vocabulary is split between roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub keys: Range<u32>,
    pub values: Range<u32>,
    pub filler: Range<u32>,
}

impl VocabLayout {
    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        let first = special::FIRST_FREE as usize;
        if vocab_size < first + 3 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} leaves no room for task tokens (need ≥ {})",
                first + 3
            )));
        }
        let third = (vocab_size - first) / 3;
        let a = first as u32;
        let b = a + third as u32;
        let c = b + third as u32;
        Ok(Self {
            keys: a..b,
            values: b..c,
            filler: c..vocab_size as u32,
        })
    }

    pub fn content(&self) -> Range<u32> {
        self.keys.start..self.filler.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Context tokens excluding the leading system token. Derived from
    /// `n_pairs` for the lookup kinds.
    pub context_len: usize,
    pub n_pairs: usize,
    pub n_queries: usize,
    pub needle_depths: Vec<f64>,
    pub vocab_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn lookup(n_pairs: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::LookupKv,
            context_len: 2 * n_pairs,
            n_pairs,
            n_queries: 1,
            needle_depths: Vec::new(),
            vocab_size,
            seed,
        }
    }

    pub fn multi_query_lookup(n_pairs: usize, n_queries: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::MultiQueryLookup,
            n_queries,
            ..Self::lookup(n_pairs, vocab_size, seed)
        }
    }

    pub fn niah(context_len: usize, depths: Vec<f64>, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Niah,
            context_len,
            n_pairs: 1,
            n_queries: 1,
            needle_depths: depths,
            vocab_size,
            seed,
        }
    }

    pub fn copy(context_len: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Copy,
            context_len,
            n_pairs: 0,
            n_queries: 1,
            needle_depths: Vec::new(),
            vocab_size,
            seed,
        }
    }

    /// Total context length including the system token.
    pub fn n_context(&self) -> usize {
        1 + self.context_len
    }

    /// Longest prompt+answer any query of this spec appends.
    pub fn max_query_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy => 2 + self.context_len + 1,
            _ => 3,
        }
    }

    pub fn validate(&self, max_position: usize) -> Result<()> {
        let layout = VocabLayout::for_vocab(self.vocab_size)?;
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            TaskKind::LookupKv | TaskKind::MultiQueryLookup => {
                if self.n_pairs == 0 || self.context_len != 2 * self.n_pairs {
                    return bad("lookup tasks need n_pairs ≥ 1 and context_len = 2·n_pairs".into());
                }
                if self.n_pairs > layout.keys.len() || self.n_pairs > layout.values.len() {
                    return bad(format!(
                        "{} pairs exceed the {} distinct keys",
                        self.n_pairs,
                        layout.keys.len()
                    ));
                }
                if self.n_queries == 0 || self.n_queries > self.n_pairs {
                    return bad("n_queries must lie in 1..=n_pairs".into());
                }
                if self.kind == TaskKind::MultiQueryLookup && self.n_queries < 2 {
                    return bad("multi-query lookup needs at least two queries".into());
                }
            }
            TaskKind::Niah => {
                if self.context_len < 3 {
                    return bad("niah context must fit the 3-token needle".into());
                }
                if self.needle_depths.is_empty() || self.needle_depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
                    return bad("needle depths must be non-empty quantiles in [0, 1]".into());
                }
            }
            TaskKind::Copy => {
                if self.context_len == 0 {
                    return bad("copy context must be non-empty".into());
                }
            }
        }
        // the repeat pass re-reads the whole context after it
        let longest = self.n_context()
            + self
                .max_query_len()
                .max(RepeatPromptSpec::standard().first.len() + self.n_context());
        if longest > max_position {
            return Err(Error::Config(format!(
                "task needs {longest} positions but the model supports {max_position}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub prompt: TokenSeq,
    pub answer: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub context: TokenSeq,
    pub queries: Vec<Query>,
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn context_seq(body: Vec<u32>) -> TokenSeq {
    let mut tokens = Vec::with_capacity(body.len() + 1);
    tokens.push(special::SYS);
    tokens.extend(body);
    let mut roles = vec![Role::Context; tokens.len()];
    roles[0] = Role::System;
    TokenSeq {
        tokens,
        roles: Some(roles),
    }
}

fn lookup_query(key: u32, value: u32) -> Query {
    Query {
        prompt: TokenSeq::with_role(vec![special::QUERY, key], Role::Prompt),
        answer: vec![value],
    }
}

fn sample_distinct(range: &Range<u32>, n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut pool: Vec<u32> = range.clone().collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn lookup_body(layout: &VocabLayout, n_pairs: usize, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<(u32, u32)>) {
    let keys = sample_distinct(&layout.keys, n_pairs, rng);
    let values = sample_distinct(&layout.values, n_pairs, rng);
    let pairs: Vec<(u32, u32)> = keys.into_iter().zip(values).collect();
    let body = pairs.iter().flat_map(|&(k, v)| [k, v]).collect();
    (body, pairs)
}

fn niah_body(layout: &VocabLayout, len: usize, depth: f64, rng: &mut ChaCha8Rng) -> (Vec<u32>, (u32, u32)) {
    let mut body: Vec<u32> = (0..len - 3).map(|_| rng.random_range(layout.filler.clone())).collect();
    let key = rng.random_range(layout.keys.clone());
    let value = rng.random_range(layout.values.clone());
    let at = ((len - 3) as f64 * depth).round() as usize;
    body.splice(at..at, [special::NEEDLE, key, value]);
    (body, (key, value))
}

fn copy_body(layout: &VocabLayout, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let content = layout.content();
    if len <= content.len() {
        sample_distinct(&content, len, rng)
    } else {
        (0..len).map(|_| rng.random_range(content.clone())).collect()
    }
}

/// Instance `index` of a task family; deterministic in `(spec, index)`.
/// NIAH instances cycle through the configured needle depths.
pub fn gen_task(spec: &TaskSpec, index: usize) -> Result<TaskInstance> {
    let layout = VocabLayout::for_vocab(spec.vocab_size)?;
    spec.validate(usize::MAX)?;
    let mut rng = instance_rng(spec.seed, index);
    Ok(match spec.kind {
        TaskKind::LookupKv | TaskKind::MultiQueryLookup => {
            let (body, pairs) = lookup_body(&layout, spec.n_pairs, &mut rng);
            let mut asked: Vec<usize> = (0..pairs.len()).collect();
            asked.shuffle(&mut rng);
            let queries = asked[..spec.n_queries]
                .iter()
                .map(|&i| lookup_query(pairs[i].0, pairs[i].1))
                .collect();
            TaskInstance {
                context: context_seq(body),
                queries,
            }
        }
        TaskKind::Niah => {
            let depth = spec.needle_depths[index % spec.needle_depths.len()];
            let (body, (k, v)) = niah_body(&layout, spec.context_len, depth, &mut rng);
            TaskInstance {
                context: context_seq(body),
                queries: vec![lookup_query(k, v)],
            }
        }
        TaskKind::Copy => {
            let body = copy_body(&layout, spec.context_len, &mut rng);
            let context = context_seq(body);
            let prompt = TokenSeq::with_role(RepeatPromptSpec::standard().first, Role::Prompt);
            let answer = context.tokens.clone();
            TaskInstance {
                context,
                queries: vec![Query { prompt, answer }],
            }
        }
    })
}

/// `count` consecutive instances starting at index 0.
pub fn gen_tasks(spec: &TaskSpec, count: usize) -> Result<Vec<TaskInstance>> {
    (0..count).map(|i| gen_task(spec, i)).collect()
}

/// Training distribution for a task family. Each sequence is one of:
///
/// - an induction drill: distinct random tokens, then a few segments of them
///   repeated without any marker, every segment token after the first a
///   target;
/// - a reconstruction of a task context after a repeat prompt, whole or in
///   chunk-continuation form;
/// - a task context followed by its queries.
///
/// The drill is what makes key-value lookup learnable at this scale: on
/// task data alone the model settles on answer-elimination and positional
/// copying and never forms the match-and-copy circuit lookup needs.
#[derive(Clone, Debug)]
pub struct TrainingMix {
    pub spec: TaskSpec,
    pub prompt: RepeatPromptSpec,
    /// Probability of an induction drill.
    pub induction_fraction: f64,
    /// Probability of a reconstruction sequence.
    pub repeat_fraction: f64,
    /// Chunk sizes drawn for continuation-form reconstruction.
    pub chunk_sizes: Vec<usize>,
    /// Lookup queries per training context, drawn with replacement.
    pub queries_per_context: usize,
}

/// Drill contexts hold this many distinct tokens (capped by the content
/// vocabulary); each drill repeats `DRILL_SEGMENTS` segments of
/// `DRILL_SEGMENT_LEN` tokens.
const DRILL_LEN: std::ops::RangeInclusive<usize> = 8..=32;
const DRILL_SEGMENTS: usize = 3;
const DRILL_SEGMENT_LEN: std::ops::RangeInclusive<usize> = 6..=10;

impl TrainingMix {
    pub fn new(spec: TaskSpec) -> Self {
        Self {
            spec,
            prompt: RepeatPromptSpec::standard(),
            induction_fraction: 0.5,
            repeat_fraction: 0.25,
            chunk_sizes: vec![16, 32, 64],
            queries_per_context: 8,
        }
    }

    fn random_context(&self, layout: &VocabLayout, rng: &mut ChaCha8Rng) -> (TokenSeq, Vec<Query>) {
        let spec = &self.spec;
        match spec.kind {
            TaskKind::LookupKv | TaskKind::MultiQueryLookup => {
                let n = rng.random_range(2.min(spec.n_pairs)..=spec.n_pairs);
                let (body, pairs) = lookup_body(layout, n, rng);
                // with replacement, so earlier answers cannot be ruled out
                let queries = (0..self.queries_per_context)
                    .map(|_| {
                        let &(k, v) = pairs.choose(rng).expect("at least one pair");
                        lookup_query(k, v)
                    })
                    .collect();
                (context_seq(body), queries)
            }
            TaskKind::Niah => {
                let len = rng.random_range(spec.context_len.div_ceil(2).max(3)..=spec.context_len);
                let depth = rng.random_range(0.0..=1.0);
                let (body, (k, v)) = niah_body(layout, len, depth, rng);
                (context_seq(body), vec![lookup_query(k, v)])
            }
            TaskKind::Copy => {
                let len = rng.random_range(spec.context_len.div_ceil(2)..=spec.context_len);
                (context_seq(copy_body(layout, len, rng)), Vec::new())
            }
        }
    }

    fn drill(&self, layout: &VocabLayout, rng: &mut ChaCha8Rng) -> TrainingSample {
        let content = layout.content();
        let cap = content.len();
        let n = rng.random_range(*DRILL_LEN.start().min(&cap)..=*DRILL_LEN.end().min(&cap));
        let pool = sample_distinct(&content, n, rng);
        let mut tokens = vec![special::SYS];
        tokens.extend(&pool);
        let mut mask = vec![false; tokens.len()];
        for _ in 0..DRILL_SEGMENTS {
            let len = rng.random_range(DRILL_SEGMENT_LEN).min(n);
            let start = rng.random_range(0..=n - len);
            tokens.extend(&pool[start..start + len]);
            mask.push(false);
            mask.extend(vec![true; len - 1]);
        }
        TrainingSample {
            tokens,
            loss_mask: mask,
        }
    }

    fn reconstruction(&self, context: &TokenSeq, rng: &mut ChaCha8Rng) -> TrainingSample {
        let ctx = &context.tokens;
        let mut tokens = ctx.clone();
        let mut mask = vec![false; tokens.len()];
        let continuation = !self.chunk_sizes.is_empty() && ctx.len() > 2 && rng.random_bool(0.5);
        let (start, end) = if continuation {
            let m = *self.chunk_sizes.choose(rng).expect("non-empty");
            let start = rng.random_range(1..ctx.len());
            (start, (start + m).min(ctx.len()))
        } else {
            (0, ctx.len())
        };
        let prompt = self.prompt.render(ctx, start);
        tokens.extend(&prompt);
        mask.extend(vec![false; prompt.len()]);
        tokens.extend(&ctx[start..end]);
        mask.extend(vec![true; end - start]);
        TrainingSample {
            tokens,
            loss_mask: mask,
        }
    }
}

impl SampleSource for TrainingMix {
    fn sample(&self, rng: &mut ChaCha8Rng) -> TrainingSample {
        let layout = VocabLayout::for_vocab(self.spec.vocab_size).expect("validated layout");
        let u: f64 = rng.random();
        if u < self.induction_fraction {
            return self.drill(&layout, rng);
        }
        let (context, queries) = self.random_context(&layout, rng);
        if queries.is_empty() || u < self.induction_fraction + self.repeat_fraction {
            return self.reconstruction(&context, rng);
        }
        let mut tokens = context.tokens;
        let mut mask = vec![false; tokens.len()];
        for q in queries {
            tokens.extend(&q.prompt.tokens);
            mask.extend(vec![false; q.prompt.len()]);
            tokens.extend(&q.answer);
            mask.extend(vec![true; q.answer.len()]);
        }
        TrainingSample {
            tokens,
            loss_mask: mask,
        }
    }
}
