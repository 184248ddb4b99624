//! The prompt coreset: stored `(prompt, statistics)` pairs, distance-weighted
//! prompt composition, the ratio gate and the soft refinement rule.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::extractor::Prompt;
use crate::stats::{softmax_weights, stats_distance, DomainStats};

/// One stored domain: its prompt and its prompt-free feature statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreElement {
    pub prompt: Prompt,
    pub stats: DomainStats,
    /// Index of the batch that created the element.
    pub created_at: usize,
    pub refine_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    DiscardOldest,
    MergeSimilar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetConfig {
    /// Softmax temperature for the element weights.
    pub tau: f64,
    /// Ratio threshold; a batch refines the coreset iff its ratio is `<= rho`.
    pub rho: f64,
    /// Refinement step size.
    pub alpha: f64,
    pub max_size: Option<usize>,
    pub overflow_policy: OverflowPolicy,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            rho: 0.8,
            alpha: 0.999,
            max_size: None,
            overflow_policy: OverflowPolicy::DiscardOldest,
        }
    }
}

impl CoresetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidParameter(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.max_size == Some(0) {
            return Err(Error::InvalidParameter("max_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Refine,
    NewDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub decision: GateDecision,
    /// `None` when the prompt-free batch already matches the source exactly.
    pub ratio: Option<f64>,
}

/// Compares `d(source, weighted) / d(source, prompt_free)` against `rho`.
pub fn ratio_gate(
    source: &DomainStats,
    probe_noprompt: &DomainStats,
    probe_weighted: &DomainStats,
    rho: f64,
) -> Result<GateOutcome> {
    let before = stats_distance(source, probe_noprompt)?;
    let after = stats_distance(source, probe_weighted)?;
    if before == 0.0 {
        return Ok(GateOutcome { decision: GateDecision::Refine, ratio: None });
    }
    let ratio = after / before;
    let decision = if ratio <= rho { GateDecision::Refine } else { GateDecision::NewDomain };
    Ok(GateOutcome { decision, ratio: Some(ratio) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCoreset {
    elements: Vec<CoreElement>,
    config: CoresetConfig,
}

impl PromptCoreset {
    pub fn new(config: CoresetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { elements: Vec::new(), config })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[CoreElement] {
        &self.elements
    }

    pub fn config(&self) -> &CoresetConfig {
        &self.config
    }

    /// Softmax-weighted combination of the stored prompts, weighted by
    /// closeness of each element's statistics to `probe`.
    pub fn weighted_prompt(&self, probe: &DomainStats) -> Result<(Prompt, Vec<f64>)> {
        let first = self.elements.first().ok_or(Error::EmptyCoreset)?;
        let distances = self
            .elements
            .iter()
            .map(|e| stats_distance(probe, &e.stats))
            .collect::<Result<Vec<_>>>()?;
        let weights = softmax_weights(&distances, self.config.tau)?;
        let mut combined = vec![0.0; first.prompt.values().len()];
        for (e, w) in self.elements.iter().zip(&weights) {
            for (c, v) in combined.iter_mut().zip(e.prompt.values()) {
                *c += w * v;
            }
        }
        let prompt = Prompt::new(first.prompt.len(), first.prompt.token_dim(), combined)?;
        Ok((prompt, weights))
    }

    /// Pulls every element toward `(target, stats)` in proportion to
    /// `alpha * w_j`. Stored standard deviations only ever grow.
    pub fn refine_elements(
        &mut self,
        target: &Prompt,
        stats: &DomainStats,
        weights: &[f64],
        alpha: f64,
    ) -> Result<()> {
        check_dims(self.elements.len(), weights.len())?;
        for (e, &w) in self.elements.iter_mut().zip(weights) {
            if !target.same_shape(&e.prompt) {
                return Err(Error::DimensionMismatch {
                    expected: e.prompt.values().len(),
                    found: target.values().len(),
                });
            }
            check_dims(e.stats.dims(), stats.dims())?;
            let step = alpha * w;
            for (p, t) in e.prompt.values_mut().iter_mut().zip(target.values()) {
                *p += step * (t - *p);
            }
            for (m, t) in e.stats.mean.iter_mut().zip(&stats.mean) {
                *m += step * (t - *m);
            }
            for (s, t) in e.stats.std.iter_mut().zip(&stats.std) {
                *s += step * (t - *s).max(0.0);
            }
            e.refine_count += 1;
        }
        Ok(())
    }

    /// Appends a new element, then enforces `max_size` if one is set.
    pub fn add_element(&mut self, prompt: Prompt, stats: DomainStats, created_at: usize) {
        self.elements.push(CoreElement { prompt, stats, created_at, refine_count: 0 });
        if let Some(cap) = self.config.max_size {
            while self.elements.len() > cap {
                match self.config.overflow_policy {
                    OverflowPolicy::DiscardOldest => self.discard_oldest(),
                    OverflowPolicy::MergeSimilar => self.merge_closest_pair(),
                }
            }
        }
    }

    fn discard_oldest(&mut self) {
        if let Some(idx) = self
            .elements
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| e.created_at)
            .map(|(i, _)| i)
        {
            self.elements.remove(idx);
        }
    }

    fn merge_closest_pair(&mut self) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.elements.len() {
            for j in i + 1..self.elements.len() {
                // shapes are uniform within a coreset
                let d = stats_distance(&self.elements[i].stats, &self.elements[j].stats)
                    .unwrap_or(f64::INFINITY);
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, _)) = best else { return };
        let other = self.elements.remove(j);
        let keep = &mut self.elements[i];
        average_into(keep.prompt.values_mut(), other.prompt.values());
        average_into(&mut keep.stats.mean, &other.stats.mean);
        average_into(&mut keep.stats.std, &other.stats.std);
        keep.created_at = keep.created_at.min(other.created_at);
        keep.refine_count = keep.refine_count.max(other.refine_count);
    }

    pub fn snapshot(&self) -> CoresetSnapshot {
        CoresetSnapshot {
            version: SNAPSHOT_VERSION,
            elements: self
                .elements
                .iter()
                .map(|e| ElementSnapshot {
                    prompt_len: e.prompt.len(),
                    token_dim: e.prompt.token_dim(),
                    prompt: e.prompt.values().to_vec(),
                    mean: e.stats.mean.clone(),
                    std: e.stats.std.clone(),
                    created_at: e.created_at,
                    refine_count: e.refine_count,
                })
                .collect(),
        }
    }
}

fn average_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = 0.5 * (*d + s);
    }
}

pub const SNAPSHOT_VERSION: u32 = 1;

/// JSON form of a coreset for post-hoc analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetSnapshot {
    pub version: u32,
    pub elements: Vec<ElementSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSnapshot {
    pub prompt_len: usize,
    pub token_dim: usize,
    /// Row-major `prompt_len x token_dim` values.
    pub prompt: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub created_at: usize,
    pub refine_count: usize,
}
