//! Turning scores into keep-masks under per-layer, per-head and whole-head
//! budgets.

mod budget;
mod headlevel;
mod report;

pub use budget::{allocate, allocate_nonuniform, allocate_uniform, ceil_count, BudgetMode, BudgetSpec};
pub use headlevel::{allocate_headlevel, streaming_floor, HeadAssignment, HeadPolicy};
pub use report::{mask_to_policy_report, policy_report, PolicyReport};
