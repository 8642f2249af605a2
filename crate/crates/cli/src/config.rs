use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use kvzip::eviction::{BudgetMode, BudgetSpec};
use kvzip::harness::{TaskKind, TaskSpec};
use kvzip::scoring::{ScoreMethod, ScoringConfig};
use kvzip::tinylm::ModelConfig;
use kvzip::{Error, Result};

/// Every setting a command may read. Flags override the config file, which
/// overrides the built-in defaults.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Flat key = value config file; keys are the long flag names with `_`.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Model checkpoint (read by score/eval/bench, written by train via --out).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scoring method(s): kvzip, kvzip-logit, prefill-max, snap-window.
    /// Comma-separated lists are accepted by eval.
    #[arg(long)]
    pub method: Option<String>,
    /// Budget structure: nonuniform, uniform, headlevel.
    #[arg(long)]
    pub mode: Option<String>,
    /// Keep ratio in (0, 1] for compress and single-ratio eval.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Comma-separated keep ratios for the eval curve (default 0.1,0.2,…,1.0).
    #[arg(long)]
    pub ratios: Option<String>,
    /// Reconstruction chunk size in tokens.
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Sink positions kept by streaming heads (headlevel mode).
    #[arg(long)]
    pub sink: Option<usize>,
    /// Recent positions kept by streaming heads (headlevel mode); also the
    /// observation window of snap-window scoring.
    #[arg(long)]
    pub window: Option<usize>,
    /// Max-pool kernel of snap-window scoring (odd).
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Top-level seed for model init, training and task generation (default 1, the pinned recipe).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output path.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Task family: copy, lookup-kv, niah, multi-query-lookup.
    #[arg(long)]
    pub task: Option<String>,
    /// Key-value pairs per lookup context.
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Queries per context for multi-query lookup.
    #[arg(long)]
    pub n_queries: Option<usize>,
    /// Context length for copy and niah tasks.
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Number of evaluation contexts.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Which generated context score/compress/eval operate on.
    #[arg(long)]
    pub instance: Option<usize>,
    /// Score tensor produced by `score` (read by compress).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Bit-packed mask produced by `compress` (read by eval).
    #[arg(long)]
    pub mask: Option<PathBuf>,

    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f32>,
    /// Sequences per training step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    /// Query heads per KV head.
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_position: Option<usize>,

    /// Context length for the bench cost model.
    #[arg(long)]
    pub n_c: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Settings {
    /// Fill unset flags from the config file, if any.
    pub fn resolve(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)?;
        let file: Settings =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        overlay!(
            self,
            file,
            model,
            method,
            mode,
            ratio,
            ratios,
            chunk_size,
            sink,
            window,
            kernel,
            seed,
            threads,
            out,
            task,
            n_pairs,
            n_queries,
            context_len,
            instances,
            instance,
            scores,
            mask,
            steps,
            lr,
            batch_size,
            layers,
            kv_heads,
            group_size,
            head_dim,
            vocab_size,
            max_position,
            n_c
        );
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(kvzip::harness::PINNED_SEED as u64)
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| Error::Config("--model is required".into()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = kvzip::harness::PINNED_MODEL;
        let seed = u32::try_from(self.seed()).map_err(|_| Error::Config("seed must fit in 32 bits".into()))?;
        let cfg = ModelConfig::new(
            self.layers.unwrap_or(d.n_layers),
            self.kv_heads.unwrap_or(d.n_kv_heads),
            self.group_size.unwrap_or(d.group_size),
            self.head_dim.unwrap_or(d.head_dim),
            self.vocab_size.unwrap_or(d.vocab_size),
            self.max_position.unwrap_or(d.max_position),
            seed,
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_spec(&self, vocab_size: usize) -> Result<TaskSpec> {
        let kind: TaskKind = self.task.as_deref().unwrap_or("lookup-kv").parse()?;
        let pairs = self.n_pairs.unwrap_or(kvzip::harness::PINNED_PAIRS);
        let seed = self.seed().wrapping_add(1);
        let spec = match kind {
            TaskKind::LookupKv => TaskSpec::lookup(pairs, vocab_size, seed),
            TaskKind::MultiQueryLookup => {
                TaskSpec::multi_query_lookup(pairs, self.n_queries.unwrap_or(4), vocab_size, seed)
            }
            TaskKind::Niah => TaskSpec::niah(
                self.context_len.unwrap_or(64),
                vec![0.0, 0.25, 0.5, 0.75, 1.0],
                vocab_size,
                seed,
            ),
            TaskKind::Copy => TaskSpec::copy(self.context_len.unwrap_or(32), vocab_size, seed),
        };
        spec.validate(usize::MAX)?;
        Ok(spec)
    }

    pub fn methods(&self) -> Result<Vec<ScoreMethod>> {
        self.method
            .as_deref()
            .unwrap_or("kvzip")
            .split(',')
            .map(|m| m.trim().parse())
            .collect()
    }

    pub fn scoring(&self, method: ScoreMethod) -> ScoringConfig {
        let mut cfg = ScoringConfig::new(method);
        if let Some(m) = self.chunk_size {
            cfg.chunk_size = m;
        }
        if method == ScoreMethod::SnapWindow {
            cfg.window = self.window;
        }
        if let Some(k) = self.kernel {
            cfg.kernel = k;
        }
        cfg
    }

    pub fn budget(&self) -> Result<BudgetSpec> {
        let mode: BudgetMode = self.mode.as_deref().unwrap_or("nonuniform").parse()?;
        let mut b = BudgetSpec::new(self.ratio.unwrap_or(1.0), mode);
        if let Some(s) = self.sink {
            b.sink = s;
        }
        if let Some(w) = self.window {
            b.window = w;
        }
        b.validate()?;
        Ok(b)
    }

    pub fn ratio_list(&self) -> Result<Vec<f64>> {
        match &self.ratios {
            None => Ok((1..=10).map(|i| i as f64 / 10.0).collect()),
            Some(s) => s
                .split(',')
                .map(|r| {
                    r.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad ratio `{r}`")))
                })
                .collect(),
        }
    }
}
