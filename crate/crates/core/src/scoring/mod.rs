//! Per-pair importance scores: reconstruction scoring and the prefill-time
//! baselines, plus head-level reduction and cost accounting.

mod baselines;
mod dispatch;
mod flops;
mod kvzip;
mod prompt;
mod tensor;

pub use baselines::{
    max_pool, score_prefill_max, score_snap_observed, score_snap_window, SNAP_KERNEL, SNAP_WINDOW, SNAP_WINDOW_SHORT,
};
pub use dispatch::{score_with, ScoringConfig};
pub use flops::{extend_half_pairs, flops_scoring, prefill_half_pairs, FlopReport};
pub use kvzip::{
    chunk_ranges, score_kvzip, score_kvzip_unchunked, KvzipOptions, ScoreMode, ScoreOutput, DEFAULT_CHUNK_SIZE,
};
pub use prompt::{RepeatPromptSpec, CONTINUATION_SPAN};
pub use tensor::{aggregate_head, HeadScore, ScoreMethod, ScoreTensor};
