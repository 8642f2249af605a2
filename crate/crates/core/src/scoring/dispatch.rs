use serde::{Deserialize, Serialize};

use super::baselines::{score_prefill_max, score_snap_window, SNAP_KERNEL, SNAP_WINDOW, SNAP_WINDOW_SHORT};
use super::kvzip::{score_kvzip, KvzipOptions, ScoreMode, ScoreOutput, DEFAULT_CHUNK_SIZE};
use super::prompt::RepeatPromptSpec;
use super::tensor::ScoreMethod;
use crate::error::Result;
use crate::kvcache::KvCache;
use crate::tinylm::{Model, TokenSeq};

/// Everything needed to run one scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub method: ScoreMethod,
    pub chunk_size: usize,
    pub prompt: RepeatPromptSpec,
    /// Observation window; `None` picks by context length.
    pub window: Option<usize>,
    pub kernel: usize,
}

impl ScoringConfig {
    pub fn new(method: ScoreMethod) -> Self {
        Self {
            method,
            chunk_size: DEFAULT_CHUNK_SIZE,
            prompt: RepeatPromptSpec::standard(),
            window: None,
            kernel: SNAP_KERNEL,
        }
    }

    pub fn snap_window_for(&self, n_c: usize) -> usize {
        self.window
            .unwrap_or(if n_c < 1024 { SNAP_WINDOW_SHORT } else { SNAP_WINDOW })
    }
}

/// Score `context` (whose prefill is `cache`) with the configured method.
pub fn score_with(model: &Model, cache: &KvCache, context: &TokenSeq, cfg: &ScoringConfig) -> Result<ScoreOutput> {
    let kvzip = |mode| {
        let opts = KvzipOptions {
            chunk_size: cfg.chunk_size,
            prompt: cfg.prompt.clone(),
            mode,
        };
        score_kvzip(model, cache, context, &opts)
    };
    match cfg.method {
        ScoreMethod::Kvzip => kvzip(ScoreMode::Softmax),
        ScoreMethod::KvzipLogit => kvzip(ScoreMode::Logit),
        ScoreMethod::PrefillMax => score_prefill_max(model, context),
        ScoreMethod::SnapWindow => score_snap_window(model, context, cfg.snap_window_for(context.len()), cfg.kernel),
    }
}
