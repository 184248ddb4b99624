//! Single experiment runs.

use std::path::{Path, PathBuf};

use dpcore::adapt::{run_policy, RunReport, RunSummary};
use dpcore::coreset::CoresetSnapshot;
use dpcore::seed::derive;
use dpcore::streams::{generate, StreamSpec};
use dpcore::testbed::{realize_stream, Testbed};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::files::{read_json, write_all_atomic};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryFile<'a> {
    pub schema_version: u32,
    pub policy: &'a str,
    pub seed: u64,
    pub summary: &'a RunSummary,
    pub coreset: &'a Option<CoresetSnapshot>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    pub report: RunReport,
    pub trace_csv: String,
    pub summary_json: String,
}

impl RunArtifacts {
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}", self.report.policy, self.seed)
    }
}

/// Runs one seed of `cfg` on an already built testbed.
pub fn run_on(cfg: &ExperimentConfig, testbed: &Testbed, seed: u64) -> CliResult<RunArtifacts> {
    let spec = StreamSpec { seed: derive(seed, &[1, cfg.stream.seed]), ..cfg.stream.clone() };
    let stream = generate(&spec)?;
    let batches = realize_stream(&testbed.model, &stream, cfg.batch_size, derive(seed, &[2]))?;
    let state = testbed.state(cfg.coreset.clone(), cfg.optim.clone(), cfg.prompt_len, derive(seed, &[3]))?;
    let report = run_policy(&cfg.policy, &batches, state, &testbed.classifier)?;
    let summary = SummaryFile {
        schema_version: SUMMARY_SCHEMA_VERSION,
        policy: &report.policy,
        seed,
        summary: &report.summary,
        coreset: &report.coreset,
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
    let trace_csv = report.to_csv();
    Ok(RunArtifacts { seed, report, trace_csv, summary_json })
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> CliResult<RunArtifacts> {
    cfg.validate()?;
    let testbed = Testbed::build(&cfg.testbed, cfg.n_ref)?;
    run_on(cfg, &testbed, seed)
}

/// Loads a config, runs every requested seed and writes a trace CSV and a
/// summary JSON per seed. Nothing is written unless every run succeeds.
pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let cfg: ExperimentConfig = read_json(config)?;
    cfg.validate()?;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let testbed = Testbed::build(&cfg.testbed, cfg.n_ref)?;
    let mut files = Vec::new();
    for s in seeds {
        let art = run_on(&cfg, &testbed, s)?;
        let stem = art.file_stem();
        files.push((out_dir.join(format!("{stem}_trace.csv")), art.trace_csv));
        files.push((out_dir.join(format!("{stem}_summary.json")), art.summary_json));
    }
    write_all_atomic(&files)?;
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
