//! Mean-only online clustering with a hard separation threshold, and the
//! property checks that go with it.
//!
//! Each batch is reduced to its feature mean. A batch joins the nearest
//! cluster if that cluster's core mean lies within `theta`; otherwise it
//! opens a new one. With harmonic weights the core mean is the running
//! average of its members, which makes the final state independent of the
//! order the batches arrive in whenever the clusters are well separated.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adamw_step, Moments, OptimConfig};
use crate::error::{check_dims, Error, Result};
use crate::extractor::Prompt;
use crate::stats::l2_dist;

/// Instances with at most this many batches are checked over every order.
pub const EXHAUSTIVE_LIMIT: usize = 7;
pub const SAMPLED_PERMUTATIONS: usize = 100;
pub const MEAN_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed(f64),
    /// `alpha = 1 / |G|` after the new member is counted.
    Harmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedConfig {
    pub theta: f64,
    pub alpha_mode: AlphaMode,
}

impl SimplifiedConfig {
    pub fn harmonic(theta: f64) -> Self {
        Self { theta, alpha_mode: AlphaMode::Harmonic }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidParameter(format!("theta must be > 0, got {}", self.theta)));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterState {
    pub core_means: Vec<Vec<f64>>,
    /// Filled in by [`attach_prompts`] or [`refine_prompts_online`].
    pub core_prompts: Vec<Prompt>,
    pub member_counts: Vec<usize>,
    /// Cluster index chosen for each processed batch, in arrival order.
    pub assignments: Vec<usize>,
}

impl ClusterState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_clusters(&self) -> usize {
        self.core_means.len()
    }

    /// Nearest cluster within `theta`, if any. Ties go to the lower index.
    fn nearest_within(&self, mean: &[f64], theta: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, mu) in self.core_means.iter().enumerate() {
            let d = l2_dist(mu, mean);
            if d <= theta && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    }
}

pub fn simplified_step(state: &mut ClusterState, batch_mean: &[f64], config: &SimplifiedConfig) -> Result<usize> {
    config.validate()?;
    if batch_mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("batch mean"));
    }
    if let Some(first) = state.core_means.first() {
        check_dims(first.len(), batch_mean.len())?;
    }
    let j = match state.nearest_within(batch_mean, config.theta) {
        Some(j) => {
            state.member_counts[j] += 1;
            let alpha = match config.alpha_mode {
                AlphaMode::Fixed(a) => a,
                AlphaMode::Harmonic => 1.0 / state.member_counts[j] as f64,
            };
            for (m, b) in state.core_means[j].iter_mut().zip(batch_mean) {
                *m = (1.0 - alpha) * *m + alpha * b;
            }
            j
        }
        None => {
            state.core_means.push(batch_mean.to_vec());
            state.member_counts.push(1);
            state.core_means.len() - 1
        }
    };
    state.assignments.push(j);
    Ok(j)
}

pub fn run_simplified(batch_means: &[Vec<f64>], config: &SimplifiedConfig) -> Result<ClusterState> {
    let mut state = ClusterState::new();
    for m in batch_means {
        simplified_step(&mut state, m, config)?;
    }
    Ok(state)
}

/// Learns a prompt that moves a mean onto the source mean.
///
/// `learn` must depend on nothing but the mean it is given.
pub trait PromptLearner {
    fn learn(&self, mean: &[f64]) -> Result<Prompt>;
    fn refine(&self, prompt: &Prompt, mean: &[f64]) -> Result<Prompt>;
}

/// Single-token additive prompt trained with AdamW on `||mu_s - (mu + p)||`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftLearner {
    pub source_mean: Vec<f64>,
    pub optim: OptimConfig,
}

impl MeanShiftLearner {
    fn grad(&self, prompt: &Prompt, mean: &[f64]) -> Prompt {
        let resid: Vec<f64> = mean
            .iter()
            .zip(prompt.values())
            .zip(&self.source_mean)
            .map(|((m, p), s)| m + p - s)
            .collect();
        let norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
        let g = if norm > 0.0 { resid.iter().map(|r| r / norm).collect() } else { vec![0.0; resid.len()] };
        Prompt::from_parts_unchecked(1, resid.len(), g)
    }

    fn run(&self, mut prompt: Prompt, mean: &[f64], steps: usize) -> Result<Prompt> {
        check_dims(self.source_mean.len(), mean.len())?;
        let mut moments = Moments::new(prompt.values().len());
        for _ in 0..steps {
            let g = self.grad(&prompt, mean);
            adamw_step(&mut prompt, &g, &mut moments, &self.optim)?;
        }
        Ok(prompt)
    }
}

impl PromptLearner for MeanShiftLearner {
    fn learn(&self, mean: &[f64]) -> Result<Prompt> {
        self.run(Prompt::zeros(1, mean.len()), mean, self.optim.steps_scratch)
    }

    fn refine(&self, prompt: &Prompt, mean: &[f64]) -> Result<Prompt> {
        self.run(prompt.clone(), mean, self.optim.steps_refine)
    }
}

/// Sets every cluster's prompt to a fresh scratch fit of its current mean.
pub fn attach_prompts(state: &mut ClusterState, learner: &dyn PromptLearner) -> Result<()> {
    state.core_prompts = state.core_means.iter().map(|m| learner.learn(m)).collect::<Result<_>>()?;
    Ok(())
}

/// Clusters the batches while also refining prompts as batches arrive:
/// scratch fit on creation, one refinement per later member. This is the
/// path on which prompts are not order independent.
pub fn refine_prompts_online(
    batch_means: &[Vec<f64>],
    config: &SimplifiedConfig,
    learner: &dyn PromptLearner,
) -> Result<ClusterState> {
    let mut state = ClusterState::new();
    for m in batch_means {
        let before = state.num_clusters();
        let j = simplified_step(&mut state, m, config)?;
        if j == before {
            state.core_prompts.push(learner.learn(m)?);
        } else {
            state.core_prompts[j] = learner.refine(&state.core_prompts[j], m)?;
        }
    }
    Ok(state)
}

/// True when `a` and `b` induce the same partition, i.e. they agree up to
/// a one-to-one relabeling.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

fn group_indices(truth: &[usize]) -> Vec<Vec<usize>> {
    let k = truth.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &g) in truth.iter().enumerate() {
        groups[g].push(i);
    }
    groups
}

/// Lower bound on the distance between the convex hulls of two point sets.
///
/// Runs Frank-Wolfe for the min-norm point of the Minkowski difference and
/// returns the bound given by its duality gap, so a positive answer is a
/// certificate rather than an estimate.
pub fn hull_distance_lower_bound(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let diffs: Vec<Vec<f64>> = a
        .iter()
        .flat_map(|x| b.iter().map(move |y| x.iter().zip(*y).map(|(p, q)| p - q).collect()))
        .collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut z = diffs[0].clone();
    let mut best_lower: f64 = 0.0;
    for it in 0..2000 {
        let zz = dot(&z, &z);
        let (s, zs) = diffs
            .iter()
            .map(|d| (d, dot(&z, d)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty sets");
        // Every hull point h satisfies |h| >= <z, h> / |z| >= zs / |z|.
        if zz > 0.0 {
            best_lower = best_lower.max(zs / zz.sqrt());
        }
        let gap = zz - zs;
        if gap <= 1e-12 * zz.max(1e-300) {
            break;
        }
        let dir: Vec<f64> = s.iter().zip(&z).map(|(p, q)| p - q).collect();
        let dd = dot(&dir, &dir);
        let step = if dd > 0.0 { (-dot(&z, &dir) / dd).clamp(0.0, 1.0) } else { 0.0 };
        if step == 0.0 && it > 0 {
            break;
        }
        for (zi, di) in z.iter_mut().zip(&dir) {
            *zi += step * di;
        }
    }
    best_lower
}

/// Checks `diam(conv G_i) < theta < dist(conv G_i, conv G_j)` for all groups.
pub fn check_separation(batch_means: &[Vec<f64>], truth: &[usize], theta: f64) -> Result<()> {
    check_dims(batch_means.len(), truth.len())?;
    let groups = group_indices(truth);
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("ground-truth labels must be contiguous from 0".into()));
    }
    for (g, idx) in groups.iter().enumerate() {
        for (n, &i) in idx.iter().enumerate() {
            for &j in &idx[n + 1..] {
                let d = l2_dist(&batch_means[i], &batch_means[j]);
                if d >= theta {
                    return Err(Error::Precondition(format!(
                        "cluster {g} has diameter >= {d:.4}, not below theta {theta}"
                    )));
                }
            }
        }
    }
    for gi in 0..groups.len() {
        for gj in gi + 1..groups.len() {
            let a: Vec<&[f64]> = groups[gi].iter().map(|&i| batch_means[i].as_slice()).collect();
            let b: Vec<&[f64]> = groups[gj].iter().map(|&i| batch_means[i].as_slice()).collect();
            let lb = hull_distance_lower_bound(&a, &b);
            if lb <= theta {
                return Err(Error::Precondition(format!(
                    "clusters {gi} and {gj} are not certified farther apart than theta {theta}"
                )));
            }
        }
    }
    Ok(())
}

/// Assignments of a run in the given order match the ground truth up to
/// relabeling.
pub fn check_prop1(batch_means: &[Vec<f64>], truth: &[usize], config: &SimplifiedConfig) -> Result<bool> {
    check_separation(batch_means, truth, config.theta)?;
    let state = run_simplified(batch_means, config)?;
    Ok(same_partition(&state.assignments, truth))
}

/// All orders of `0..n`, in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = vec![perm.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else { break };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).expect("successor exists");
        perm.swap(i - 1, j);
        perm[i..].reverse();
        out.push(perm.clone());
    }
    out
}

/// Every order for small inputs, otherwise the identity plus sampled orders.
pub fn orders_to_check(n: usize, seed: u64) -> Vec<Vec<usize>> {
    if n <= EXHAUSTIVE_LIMIT {
        return all_permutations(n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![(0..n).collect::<Vec<_>>()];
    while out.len() < SAMPLED_PERMUTATIONS {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        out.push(p);
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    l2_dist(a, b) / b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0)
}

fn exact_mean(batch_means: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; batch_means[idx[0]].len()];
    for &i in idx {
        for (a, b) in m.iter_mut().zip(&batch_means[i]) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= idx.len() as f64);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub permutations: usize,
    /// Every order produced the ground-truth partition.
    pub assignments_invariant: bool,
    /// Largest relative gap between a core mean and its exact cluster mean.
    pub max_mean_rel_err: f64,
    /// Largest gap between a cluster's prompt and the identity-order prompt.
    pub max_prompt_diff: f64,
}

impl OrderReport {
    pub fn holds(&self, check_means: bool) -> bool {
        self.assignments_invariant && (!check_means || self.max_mean_rel_err <= MEAN_REL_TOL)
    }
}

/// Runs every order from [`orders_to_check`] and collects the worst case.
/// With a learner, prompts are attached from the final means.
pub fn order_report(
    batch_means: &[Vec<f64>],
    truth: &[usize],
    config: &SimplifiedConfig,
    learner: Option<&dyn PromptLearner>,
    seed: u64,
) -> Result<OrderReport> {
    check_separation(batch_means, truth, config.theta)?;
    let groups = group_indices(truth);
    let exact: Vec<Vec<f64>> = groups.iter().map(|idx| exact_mean(batch_means, idx)).collect();
    let orders = orders_to_check(batch_means.len(), seed);
    let mut report = OrderReport {
        permutations: orders.len(),
        assignments_invariant: true,
        max_mean_rel_err: 0.0,
        max_prompt_diff: 0.0,
    };
    let mut reference: Option<Vec<Prompt>> = None;
    for order in &orders {
        let ordered: Vec<Vec<f64>> = order.iter().map(|&i| batch_means[i].clone()).collect();
        let mut state = run_simplified(&ordered, config)?;
        // Back to original batch indexing.
        let mut assigned = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            assigned[i] = state.assignments[pos];
        }
        if !same_partition(&assigned, truth) {
            report.assignments_invariant = false;
            continue;
        }
        let cluster_of: Vec<usize> = groups.iter().map(|idx| assigned[idx[0]]).collect();
        for (g, &c) in cluster_of.iter().enumerate() {
            report.max_mean_rel_err = report.max_mean_rel_err.max(rel_err(&state.core_means[c], &exact[g]));
        }
        if let Some(learner) = learner {
            attach_prompts(&mut state, learner)?;
            let prompts: Vec<Prompt> = cluster_of.iter().map(|&c| state.core_prompts[c].clone()).collect();
            match &reference {
                None => reference = Some(prompts),
                Some(r) => {
                    for (p, q) in prompts.iter().zip(r) {
                        report.max_prompt_diff = report.max_prompt_diff.max(l2_dist(p.values(), q.values()));
                    }
                }
            }
        }
    }
    Ok(report)
}

pub fn check_prop2_order_invariance(
    batch_means: &[Vec<f64>],
    truth: &[usize],
    config: &SimplifiedConfig,
    seed: u64,
) -> Result<bool> {
    let check_means = config.alpha_mode == AlphaMode::Harmonic;
    Ok(order_report(batch_means, truth, config, None, seed)?.holds(check_means))
}

/// Largest prompt gap across orders when prompts are refined online instead
/// of refit from the final means. Reported, not asserted.
pub fn online_prompt_order_gap(
    batch_means: &[Vec<f64>],
    truth: &[usize],
    config: &SimplifiedConfig,
    learner: &dyn PromptLearner,
    seed: u64,
) -> Result<f64> {
    check_separation(batch_means, truth, config.theta)?;
    let groups = group_indices(truth);
    let mut reference: Option<Vec<Prompt>> = None;
    let mut gap: f64 = 0.0;
    for order in orders_to_check(batch_means.len(), seed) {
        let ordered: Vec<Vec<f64>> = order.iter().map(|&i| batch_means[i].clone()).collect();
        let state = refine_prompts_online(&ordered, config, learner)?;
        let mut assigned = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            assigned[i] = state.assignments[pos];
        }
        let prompts: Vec<Prompt> = groups.iter().map(|idx| state.core_prompts[assigned[idx[0]]].clone()).collect();
        match &reference {
            None => reference = Some(prompts),
            Some(r) => {
                for (p, q) in prompts.iter().zip(r) {
                    gap = gap.max(l2_dist(p.values(), q.values()));
                }
            }
        }
    }
    Ok(gap)
}

/// A labelled set of batch means that satisfies the separation assumption.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedInstance {
    pub batch_means: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
    pub theta: f64,
}

/// Cluster centres at least `10 * theta` apart, members inside a ball of
/// radius `0.4 * theta` around their centre. Labels are shuffled so the
/// arrival order carries no information.
pub fn random_separated_instance(
    num_clusters: usize,
    num_batches: usize,
    dim: usize,
    seed: u64,
) -> Result<SeparatedInstance> {
    if num_clusters == 0 || num_batches < num_clusters || dim == 0 {
        return Err(Error::InvalidParameter("need dim >= 1 and num_batches >= num_clusters >= 1".into()));
    }
    let theta = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let box_half = 10.0 * theta * num_clusters as f64;
    let mut centres: Vec<Vec<f64>> = Vec::new();
    while centres.len() < num_clusters {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-box_half..box_half)).collect();
        if centres.iter().all(|o| l2_dist(o, &c) >= 10.0 * theta) {
            centres.push(c);
        }
    }
    let mut truth: Vec<usize> = (0..num_batches).map(|i| i % num_clusters).collect();
    truth.shuffle(&mut rng);
    let batch_means = truth
        .iter()
        .map(|&g| {
            let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let r = rng.random_range(0.0..0.4 * theta);
            centres[g].iter().zip(&dir).map(|(c, d)| c + r * d / n).collect()
        })
        .collect();
    // Relabel so cluster ids follow first appearance.
    let mut map = vec![usize::MAX; num_clusters];
    let mut next = 0;
    let truth = truth
        .iter()
        .map(|&g| {
            if map[g] == usize::MAX {
                map[g] = next;
                next += 1;
            }
            map[g]
        })
        .collect();
    Ok(SeparatedInstance { batch_means, truth, theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn harmonic() -> SimplifiedConfig {
        SimplifiedConfig::harmonic(1.0)
    }

    #[test]
    fn first_batch_opens_cluster() {
        let mut s = ClusterState::new();
        assert_eq!(simplified_step(&mut s, &[1.0, 2.0], &harmonic()).unwrap(), 0);
        assert_eq!(s.core_means, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn close_batch_joins() {
        let mut s = ClusterState::new();
        simplified_step(&mut s, &[0.0, 0.0], &harmonic()).unwrap();
        assert_eq!(simplified_step(&mut s, &[0.5, 0.0], &harmonic()).unwrap(), 0);
        assert_eq!(simplified_step(&mut s, &[5.0, 0.0], &harmonic()).unwrap(), 1);
        assert_eq!(s.member_counts, vec![2, 1]);
    }

    #[test]
    fn harmonic_mean_is_exact() {
        let b = [[0.1, 0.2], [0.3, -0.1], [-0.2, 0.4]];
        let mut s = ClusterState::new();
        for v in &b {
            simplified_step(&mut s, v, &harmonic()).unwrap();
        }
        assert_eq!(s.num_clusters(), 1);
        for k in 0..2 {
            let want = (b[0][k] + b[1][k] + b[2][k]) / 3.0;
            assert!((s.core_means[0][k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = ClusterState::new();
        assert!(simplified_step(&mut s, &[f64::NAN], &harmonic()).is_err());
        assert!(simplified_step(&mut s, &[0.0], &SimplifiedConfig::harmonic(0.0)).is_err());
        let fixed = SimplifiedConfig { theta: 1.0, alpha_mode: AlphaMode::Fixed(1.5) };
        assert!(simplified_step(&mut s, &[0.0], &fixed).is_err());
    }

    #[test]
    fn permutation_enumeration() {
        assert_eq!(all_permutations(3).len(), 6);
        assert_eq!(all_permutations(6).len(), 720);
        assert_eq!(all_permutations(1), vec![vec![0]]);
        assert_eq!(orders_to_check(9, 0).len(), SAMPLED_PERMUTATIONS);
    }

    #[test]
    fn partition_equality() {
        assert!(same_partition(&[0, 1, 0, 2], &[2, 0, 2, 1]));
        assert!(!same_partition(&[0, 1, 0], &[0, 0, 0]));
        assert!(!same_partition(&[0, 0, 0], &[0, 1, 0]));
    }

    #[test]
    fn hull_bound_on_known_geometry() {
        // Segments x=0 and x=3 in the plane: exact distance 3.
        let a = [[0.0, 0.0], [0.0, 1.0]];
        let b = [[3.0, -1.0], [3.0, 2.0]];
        let ar: Vec<&[f64]> = a.iter().map(|p| p.as_slice()).collect();
        let br: Vec<&[f64]> = b.iter().map(|p| p.as_slice()).collect();
        let lb = hull_distance_lower_bound(&ar, &br);
        assert!(lb <= 3.0 + 1e-12 && lb > 2.99, "{lb}");
        // Overlapping hulls certify nothing.
        let c = [[-1.0, 0.5], [1.0, 0.5]];
        let cr: Vec<&[f64]> = c.iter().map(|p| p.as_slice()).collect();
        assert!(hull_distance_lower_bound(&ar, &cr) < 1e-6);
    }

    #[test]
    fn three_blobs_prop1() {
        let theta = 1.0;
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut means = Vec::new();
        let mut truth = Vec::new();
        for k in 0..4 {
            for (g, c) in centres.iter().enumerate() {
                let jitter = 0.1 * k as f64;
                means.push(vec![c[0] + jitter, c[1] - jitter]);
                truth.push(g);
            }
        }
        assert!(check_prop1(&means, &truth, &SimplifiedConfig::harmonic(theta)).unwrap());
        assert!(check_prop1(&[vec![1.0]], &[0], &SimplifiedConfig::harmonic(theta)).unwrap());
    }

    #[test]
    fn wide_blob_is_a_precondition_error() {
        let means = vec![vec![0.0], vec![2.0], vec![50.0]];
        let err = check_prop1(&means, &[0, 0, 1], &harmonic()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn two_by_three_all_orders() {
        let means = vec![vec![0.0, 0.0], vec![0.2, 0.1], vec![-0.1, 0.3], vec![8.0, 8.0], vec![8.3, 7.9], vec![7.8, 8.2]];
        let truth = vec![0, 0, 0, 1, 1, 1];
        let r = order_report(&means, &truth, &harmonic(), None, 0).unwrap();
        assert_eq!(r.permutations, 720);
        assert!(r.holds(true));
        assert!(check_prop2_order_invariance(&[vec![3.0]], &[0], &harmonic(), 0).unwrap());
    }

    #[test]
    fn fixed_alpha_keeps_assignments_but_not_means() {
        let means = vec![vec![0.0], vec![0.3], vec![0.6], vec![9.0], vec![9.2], vec![9.5]];
        let truth = vec![0, 0, 0, 1, 1, 1];
        let fixed = SimplifiedConfig { theta: 1.0, alpha_mode: AlphaMode::Fixed(0.5) };
        let r = order_report(&means, &truth, &fixed, None, 0).unwrap();
        assert!(r.assignments_invariant);
        assert!(r.max_mean_rel_err > 1e-3, "fixed alpha should depend on order");
        assert!(check_prop2_order_invariance(&means, &truth, &fixed, 0).unwrap());
    }

    #[test]
    fn prompts_from_final_means_are_order_free() {
        let inst = random_separated_instance(2, 6, 3, 5).unwrap();
        let learner = MeanShiftLearner { source_mean: vec![0.0; 3], optim: OptimConfig { lr: 0.1, ..OptimConfig::default() } };
        let cfg = SimplifiedConfig::harmonic(inst.theta);
        let r = order_report(&inst.batch_means, &inst.truth, &cfg, Some(&learner), 0).unwrap();
        assert!(r.max_prompt_diff < 1e-9, "{}", r.max_prompt_diff);
        let online = online_prompt_order_gap(&inst.batch_means, &inst.truth, &cfg, &learner, 0).unwrap();
        assert!(online > r.max_prompt_diff);
    }

    #[test]
    fn generator_rejects_bad_shapes() {
        assert!(random_separated_instance(3, 2, 2, 0).is_err());
        assert!(random_separated_instance(0, 2, 2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn counts_sum_to_batches(seed in 0u64..1000, k in 1usize..5, extra in 0usize..6) {
            let inst = random_separated_instance(k, k + extra, 3, seed).unwrap();
            let s = run_simplified(&inst.batch_means, &SimplifiedConfig::harmonic(inst.theta)).unwrap();
            prop_assert_eq!(s.member_counts.iter().sum::<usize>(), k + extra);
            prop_assert!(s.member_counts.iter().all(|&c| c >= 1));
            prop_assert_eq!(s.num_clusters(), k);
        }

        #[test]
        fn decision_ignores_arrival_index(seed in 0u64..1000) {
            // Same state, same mean: same answer regardless of history length.
            let inst = random_separated_instance(3, 6, 2, seed).unwrap();
            let cfg = SimplifiedConfig::harmonic(inst.theta);
            let s = run_simplified(&inst.batch_means, &cfg).unwrap();
            let probe = inst.batch_means[0].clone();
            let mut a = s.clone();
            let mut b = ClusterState { assignments: Vec::new(), ..s };
            prop_assert_eq!(simplified_step(&mut a, &probe, &cfg).unwrap(), simplified_step(&mut b, &probe, &cfg).unwrap());
        }
    }
}
