//! Policy runner over a realised stream of labelled batches.

use serde::{Deserialize, Serialize};

use super::engine::{AdaptState, BatchDecision, Path};
use super::report::{BatchRecord, RunReport};
use crate::coreset::{CoresetConfig, OverflowPolicy};
use crate::error::{Error, Result};
use crate::extractor::Prompt;
use crate::stats::FeatureBatch;
use crate::testbed::{Evaluator, LabeledBatch};

/// Adaptation policies, from the unadapted model to the full method and its
/// ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    SourceOnly,
    /// One prompt for everything, refined by one step per batch.
    SinglePrompt,
    /// A new prompt learned from scratch for every batch.
    PerBatchScratch,
    DpCore,
    DpCoreFixedK { max_size: usize, overflow_policy: OverflowPolicy },
    /// Single-sample arrivals accumulated `buffer` at a time.
    DpCoreB { buffer: usize },
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::SourceOnly => "source_only".into(),
            Policy::SinglePrompt => "single_prompt".into(),
            Policy::PerBatchScratch => "per_batch_scratch".into(),
            Policy::DpCore => "dpcore".into(),
            Policy::DpCoreFixedK { max_size, overflow_policy } => {
                let p = match overflow_policy {
                    OverflowPolicy::DiscardOldest => "discard",
                    OverflowPolicy::MergeSimilar => "merge",
                };
                format!("dpcore_k{max_size}_{p}")
            }
            Policy::DpCoreB { buffer } => format!("dpcore_b{buffer}"),
        }
    }
}

fn record(decision: &BatchDecision, domain: Option<usize>, error: f64) -> BatchRecord {
    BatchRecord {
        index: decision.index,
        true_domain: domain,
        path: decision.path,
        ratio: decision.ratio,
        d_pre: decision.d_pre,
        d_post: decision.d_post,
        error,
        k: decision.coreset_size,
        fp: decision.cost.forward,
        bp: decision.cost.backward,
    }
}

/// Runs `policy` over `stream`. Labels and hidden domains are read only to
/// score predictions after each adaptation step has finished.
pub fn run_policy(
    policy: &Policy,
    stream: &[LabeledBatch],
    mut state: AdaptState,
    evaluator: &dyn Evaluator,
) -> Result<RunReport> {
    if stream.is_empty() {
        return Err(Error::InvalidParameter("empty stream".into()));
    }
    let mut records = Vec::with_capacity(stream.len());
    match policy {
        Policy::SourceOnly => {
            for (index, b) in stream.iter().enumerate() {
                let feats = state.extractor().extract(&b.input, None)?;
                let d = state.source_distance(&feats)?;
                records.push(BatchRecord {
                    index,
                    true_domain: b.input.hidden_domain,
                    path: Path::NoAdapt,
                    ratio: None,
                    d_pre: d,
                    d_post: d,
                    error: evaluator.error(&feats, &b.labels),
                    k: 0,
                    fp: 1,
                    bp: 0,
                });
            }
            return Ok(RunReport::new(policy.label(), records, None));
        }
        Policy::SinglePrompt => {
            let mut prompt: Option<Prompt> = None;
            for b in stream {
                let out = state.single_prompt_step(&b.input, &mut prompt)?;
                let err = evaluator.error(&out.features, &b.labels);
                records.push(record(&out.decision, b.input.hidden_domain, err));
            }
        }
        Policy::PerBatchScratch => {
            for (index, b) in stream.iter().enumerate() {
                let before = *state.counters();
                let plain = state.extractor().extract(&b.input, None)?;
                let d_pre = state.source_distance(&plain)?;
                let batch_stats = crate::stats::compute_stats(&plain)?;
                let (prompt, _) = state.learn_prompt_from_scratch(&b.input)?;
                let feats = state.extractor().extract(&b.input, Some(&prompt))?;
                let d_post = state.source_distance(&feats)?;
                state.coreset.add_element(prompt, batch_stats, index);
                state.charge_batch(1);
                let cost = state.counters().since(&before);
                records.push(BatchRecord {
                    index,
                    true_domain: b.input.hidden_domain,
                    path: Path::Scratch,
                    ratio: None,
                    d_pre,
                    d_post,
                    error: evaluator.error(&feats, &b.labels),
                    k: state.coreset.len(),
                    fp: cost.forward,
                    bp: cost.backward,
                });
            }
        }
        Policy::DpCore => {
            for b in stream {
                let out = state.dpcore_step(&b.input)?;
                let err = evaluator.error(&out.features, &b.labels);
                records.push(record(&out.decision, b.input.hidden_domain, err));
            }
        }
        Policy::DpCoreFixedK { max_size, overflow_policy } => {
            let cfg = CoresetConfig {
                max_size: Some(*max_size),
                overflow_policy: *overflow_policy,
                ..state.coreset.config().clone()
            };
            state = state.with_coreset_config(cfg)?;
            for b in stream {
                let out = state.dpcore_step(&b.input)?;
                let err = evaluator.error(&out.features, &b.labels);
                records.push(record(&out.decision, b.input.hidden_domain, err));
            }
        }
        Policy::DpCoreB { buffer } => {
            state = state.with_buffer(*buffer)?;
            for (index, b) in stream.iter().enumerate() {
                let before = *state.counters();
                let mut preds = Vec::with_capacity(b.rows());
                let mut last: Option<BatchDecision> = None;
                for sample in b.split_rows() {
                    let out = state.dpcore_b_step(&sample.input)?;
                    preds.push(out.features);
                    if out.decision.is_some() {
                        last = out.decision;
                    }
                }
                let feats = stack(&preds)?;
                let d_post = state.source_distance(&feats)?;
                let plain = state.extractor().extract(&b.input, None)?;
                let d_pre = state.source_distance(&plain)?;
                let cost = state.counters().since(&before);
                records.push(BatchRecord {
                    index,
                    true_domain: b.input.hidden_domain,
                    path: last.as_ref().map_or(Path::NoAdapt, |d| d.path),
                    ratio: last.as_ref().and_then(|d| d.ratio),
                    d_pre,
                    d_post,
                    error: evaluator.error(&feats, &b.labels),
                    k: state.coreset.len(),
                    fp: cost.forward,
                    bp: cost.backward,
                });
            }
        }
    }
    let snapshot = match policy {
        Policy::SinglePrompt => None,
        _ => Some(state.coreset.snapshot()),
    };
    Ok(RunReport::new(policy.label(), records, snapshot))
}

fn stack(parts: &[FeatureBatch]) -> Result<FeatureBatch> {
    let dims = parts.first().map_or(1, FeatureBatch::dims);
    let rows = parts.iter().map(FeatureBatch::rows).sum();
    let values = parts.iter().flat_map(|p| p.values().iter().copied()).collect();
    FeatureBatch::new(rows, dims, values)
}
