//! Per-batch traces and run summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::engine::Path;
use crate::coreset::CoresetSnapshot;

pub const TRACE_COLUMNS: [&str; 10] = ["index", "true_domain", "path", "ratio", "d_pre", "d_post", "error", "K", "fp", "bp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub true_domain: Option<usize>,
    pub path: Path,
    pub ratio: Option<f64>,
    pub d_pre: f64,
    pub d_post: f64,
    pub error: f64,
    /// Coreset size after the batch.
    pub k: usize,
    pub fp: u64,
    pub bp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub batches: usize,
    pub mean_error: f64,
    /// Mean batch error per hidden domain, keyed by domain index.
    pub mean_error_per_domain: BTreeMap<usize, f64>,
    pub final_k: usize,
    pub scratch_count: usize,
    pub refine_count: usize,
    pub total_fp: u64,
    pub total_bp: u64,
    pub mean_fp: f64,
    pub mean_bp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: String,
    pub records: Vec<BatchRecord>,
    pub summary: RunSummary,
    pub coreset: Option<CoresetSnapshot>,
}

impl RunReport {
    pub fn new(policy: String, records: Vec<BatchRecord>, coreset: Option<CoresetSnapshot>) -> Self {
        let summary = summarize(&records);
        Self { policy, records, summary, coreset }
    }

    /// `(batch index, K)` after every batch.
    pub fn coreset_size_trace(&self) -> Vec<(usize, usize)> {
        self.records.iter().map(|r| (r.index, r.k)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = TRACE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let domain = r.true_domain.map(|d| d.to_string()).unwrap_or_default();
            let ratio = r.ratio.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.index,
                domain,
                r.path.as_str(),
                ratio,
                r.d_pre,
                r.d_post,
                r.error,
                r.k,
                r.fp,
                r.bp
            )
            .expect("writing to a String");
        }
        out
    }
}

fn summarize(records: &[BatchRecord]) -> RunSummary {
    let n = records.len();
    let mean = |total: f64| if n == 0 { 0.0 } else { total / n as f64 };
    let mut per_domain: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(d) = r.true_domain {
            let e = per_domain.entry(d).or_default();
            e.0 += r.error;
            e.1 += 1;
        }
    }
    let total_fp = records.iter().map(|r| r.fp).sum();
    let total_bp = records.iter().map(|r| r.bp).sum();
    RunSummary {
        batches: n,
        mean_error: mean(records.iter().map(|r| r.error).sum()),
        mean_error_per_domain: per_domain.into_iter().map(|(d, (s, c))| (d, s / c as f64)).collect(),
        final_k: records.last().map_or(0, |r| r.k),
        scratch_count: records.iter().filter(|r| r.path == Path::Scratch).count(),
        refine_count: records.iter().filter(|r| r.path == Path::Refine).count(),
        total_fp,
        total_bp,
        mean_fp: mean(total_fp as f64),
        mean_bp: mean(total_bp as f64),
    }
}
