//! Synthetic tasks, evaluation of compressed caches and cost accounting.

mod efficiency;
mod eval;
mod experiments;
mod recipe;
mod task;

pub use efficiency::{efficiency_report, EfficiencyReport};
pub use eval::{
    compress, compression_curve, eval_queries, eval_repeat_accuracy, eval_reused, query_accuracy, CurveRow, EvalReport,
    MethodSpec, TaskSet, REPORT_SCHEMA,
};
pub use experiments::{chunk_sweep, reuse_experiment, ChunkSweepRow, ReuseReport};
pub use recipe::{pinned_recipe, ModelShape, Recipe, PINNED_MODEL, PINNED_PAIRS, PINNED_SEED};
pub use task::{gen_task, gen_tasks, Query, TaskInstance, TaskKind, TaskSpec, TrainingMix, VocabLayout};
