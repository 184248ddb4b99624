//! Experiment configuration.

use std::path::PathBuf;

use dpcore::adapt::{OptimConfig, Policy};
use dpcore::coreset::CoresetConfig;
use dpcore::streams::StreamSpec;
use dpcore::testbed::{DomainModel, TestbedConfig, DEFAULT_N_REF};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

fn default_prompt_len() -> usize {
    8
}

fn default_batch_size() -> usize {
    64
}

fn default_n_ref() -> usize {
    DEFAULT_N_REF
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment: a testbed, a domain schedule and a policy, repeated over
/// `seeds`. The domain model depends only on `testbed.seed`; the run seed
/// drives the schedule, the batch draws and prompt initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub testbed: TestbedConfig,
    pub stream: StreamSpec,
    pub policy: Policy,
    #[serde(default)]
    pub coreset: CoresetConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_n_ref")]
    pub n_ref: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Default testbed and hyperparameters with the given schedule and policy.
    pub fn new(stream: StreamSpec, policy: Policy) -> Self {
        Self {
            testbed: TestbedConfig::default(),
            stream,
            policy,
            coreset: CoresetConfig::default(),
            optim: OptimConfig::default(),
            prompt_len: default_prompt_len(),
            batch_size: default_batch_size(),
            n_ref: default_n_ref(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.testbed.validate()?;
        self.stream.validate()?;
        self.coreset.validate()?;
        self.optim.validate()?;
        let domains: usize = self.testbed.group_sizes.iter().sum();
        if self.stream.num_domains() != domains {
            return bad(format!(
                "stream lists {} domains but the testbed has {domains}",
                self.stream.num_domains()
            ));
        }
        if self.prompt_len == 0 || self.batch_size == 0 || self.n_ref == 0 {
            return bad("prompt_len, batch_size and n_ref must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        match &self.policy {
            Policy::DpCoreFixedK { max_size: 0, .. } => return bad("max_size must be >= 1".into()),
            Policy::DpCoreB { buffer: 0 } => return bad("buffer must be >= 1".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn domain_model(&self) -> CliResult<DomainModel> {
        Ok(DomainModel::from_config(&self.testbed)?)
    }
}
