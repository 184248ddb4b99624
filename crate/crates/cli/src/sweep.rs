//! Parameter grids over an experiment config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dpcore::streams::StreamKind;
use dpcore::testbed::Testbed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::files::{read_json, write_all_atomic};
use crate::run::run_on;

/// Values to sweep. An empty or missing list keeps the config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub prompt_len: Vec<usize>,
    pub rho: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub n_ref: Vec<usize>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub prompt_len: usize,
    pub rho: f64,
    pub batch_size: usize,
    pub n_ref: usize,
    pub delta: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub policy: String,
    pub mean_error: f64,
    pub final_k: usize,
    pub scratch_count: usize,
    pub mean_fp: f64,
    pub mean_bp: f64,
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "prompt_len", "rho", "batch_size", "n_ref", "delta", "seed", "policy", "mean_error", "final_k", "scratch_count",
    "mean_fp", "mean_bp",
];

fn current_delta(cfg: &ExperimentConfig) -> Option<f64> {
    match cfg.stream.kind {
        StreamKind::CdcDirichlet { delta, .. } => Some(delta),
        _ => None,
    }
}

fn or_current<T: Clone>(values: &[T], current: T) -> Vec<T> {
    if values.is_empty() {
        vec![current]
    } else {
        values.to_vec()
    }
}

/// The config for one grid point.
pub fn apply(base: &ExperimentConfig, p: &SweepPoint) -> CliResult<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.prompt_len = p.prompt_len;
    cfg.coreset.rho = p.rho;
    cfg.batch_size = p.batch_size;
    cfg.n_ref = p.n_ref;
    if let Some(d) = p.delta {
        match &mut cfg.stream.kind {
            StreamKind::CdcDirichlet { delta, .. } => *delta = d,
            _ => return Err(CliError::Config("a delta grid needs a cdc_dirichlet stream".into())),
        }
    }
    cfg.seeds = vec![p.seed];
    cfg.validate()?;
    Ok(cfg)
}

/// Cross product of the grid with the config's seeds, in a fixed order.
pub fn expand(base: &ExperimentConfig, grid: &SweepGrid) -> CliResult<Vec<SweepPoint>> {
    if !grid.delta.is_empty() && current_delta(base).is_none() {
        return Err(CliError::Config("a delta grid needs a cdc_dirichlet stream".into()));
    }
    let deltas: Vec<Option<f64>> = if grid.delta.is_empty() {
        vec![current_delta(base)]
    } else {
        grid.delta.iter().copied().map(Some).collect()
    };
    let mut points = Vec::new();
    for &prompt_len in &or_current(&grid.prompt_len, base.prompt_len) {
        for &rho in &or_current(&grid.rho, base.coreset.rho) {
            for &batch_size in &or_current(&grid.batch_size, base.batch_size) {
                for &n_ref in &or_current(&grid.n_ref, base.n_ref) {
                    for &delta in &deltas {
                        for &seed in &base.seeds {
                            points.push(SweepPoint { prompt_len, rho, batch_size, n_ref, delta, seed });
                        }
                    }
                }
            }
        }
    }
    for p in &points {
        apply(base, p)?;
    }
    Ok(points)
}

/// Runs every grid point on its own state. Rows come back in grid order
/// whatever the worker count.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid, workers: usize) -> CliResult<Vec<SweepRow>> {
    base.validate()?;
    let points = expand(base, grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let cfg = apply(base, p)?;
                let testbed = Testbed::build(&cfg.testbed, cfg.n_ref)?;
                let art = run_on(&cfg, &testbed, p.seed)?;
                let s = &art.report.summary;
                Ok(SweepRow {
                    point: p.clone(),
                    policy: art.report.policy.clone(),
                    mean_error: s.mean_error,
                    final_k: s.final_k,
                    scratch_count: s.scratch_count,
                    mean_fp: s.mean_fp,
                    mean_bp: s.mean_bp,
                })
            })
            .collect()
    })
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let p = &r.point;
        let delta = p.delta.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            p.prompt_len, p.rho, p.batch_size, p.n_ref, delta, p.seed, r.policy, r.mean_error, r.final_k,
            r.scratch_count, r.mean_fp, r.mean_bp
        )
        .expect("writing to a String");
    }
    out
}

pub fn cmd_sweep(config: &Path, grid: &Path, out: &Path, workers: usize) -> CliResult<PathBuf> {
    let base: ExperimentConfig = read_json(config)?;
    let grid: SweepGrid = read_json(grid)?;
    let rows = run_sweep(&base, &grid, workers)?;
    let path = out.join("sweep.csv");
    write_all_atomic(&[(path.clone(), rows_to_csv(&rows))])?;
    Ok(path)
}
