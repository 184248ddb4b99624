//! Prompt optimisation, the per-batch coreset algorithm, the policy zoo and
//! compute accounting.

mod counters;
mod engine;
mod optim;
mod report;
mod run;

pub use counters::{ComputeCounters, EVAL_PASSES_PER_BATCH};
pub use engine::{fit_prompt, AdaptState, BatchDecision, BufferedOutput, GateMode, Path, StepOutput};
pub use optim::{adamw_step, GradMode, Moments, OptimConfig};
pub use report::{BatchRecord, RunReport, RunSummary, TRACE_COLUMNS};
pub use run::{run_policy, Policy};
