//! Numerical checks of the simplified clustering results.

use dpcore::adapt::OptimConfig;
use dpcore::seed::derive;
use dpcore::simplified::{
    check_prop1, order_report, random_separated_instance, MeanShiftLearner, SimplifiedConfig,
};

use crate::error::{CliError, CliResult};

pub const PROMPT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropsOptions {
    pub instances: usize,
    pub seed: u64,
}

impl Default for PropsOptions {
    fn default() -> Self {
        Self { instances: 40, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PropsReport {
    pub instances: usize,
    pub correct_partitions: usize,
    pub order_invariant: usize,
    pub scratch_prompt_invariant: usize,
    pub permutations_checked: usize,
    pub max_mean_rel_err: f64,
    pub max_prompt_diff: f64,
}

impl PropsReport {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("instances: {}", self.instances),
            format!("correct partitions: {}/{}", self.correct_partitions, self.instances),
            format!(
                "order invariant: {}/{} ({} orderings, max mean rel err {:.2e})",
                self.order_invariant, self.instances, self.permutations_checked, self.max_mean_rel_err
            ),
            format!(
                "scratch prompts order invariant: {}/{} (max diff {:.2e})",
                self.scratch_prompt_invariant, self.instances, self.max_prompt_diff
            ),
        ]
    }
}

/// Runs the three suites over generated separated instances. Stops at the
/// first failing instance and names its seed.
pub fn run_props(opts: &PropsOptions) -> CliResult<PropsReport> {
    let mut rep = PropsReport { instances: opts.instances, ..Default::default() };
    let learner = MeanShiftLearner {
        source_mean: vec![0.5, -0.5, 0.0],
        optim: OptimConfig { lr: 0.1, ..OptimConfig::default() },
    };
    for i in 0..opts.instances {
        let seed = derive(opts.seed, &[i as u64]);
        let k = 2 + i % 3;
        let n = k + 2 + i % 9;
        let inst = random_separated_instance(k, n, 3, seed)?;
        let cfg = SimplifiedConfig::harmonic(inst.theta);
        if !check_prop1(&inst.batch_means, &inst.truth, &cfg)? {
            return Err(CliError::Property(format!("wrong partition for instance seed {seed}")));
        }
        rep.correct_partitions += 1;
        let r = order_report(&inst.batch_means, &inst.truth, &cfg, Some(&learner), seed)?;
        rep.permutations_checked += r.permutations;
        rep.max_mean_rel_err = rep.max_mean_rel_err.max(r.max_mean_rel_err);
        rep.max_prompt_diff = rep.max_prompt_diff.max(r.max_prompt_diff);
        if !r.holds(true) {
            return Err(CliError::Property(format!("order dependence for instance seed {seed}: {r:?}")));
        }
        rep.order_invariant += 1;
        if r.max_prompt_diff > PROMPT_TOL {
            return Err(CliError::Property(format!(
                "scratch prompts differ by {:.3e} for instance seed {seed}",
                r.max_prompt_diff
            )));
        }
        rep.scratch_prompt_invariant += 1;
    }
    Ok(rep)
}
