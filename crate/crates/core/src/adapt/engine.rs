//! Per-batch adaptation: scratch learning, the coreset step and its
//! buffered variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::counters::{ComputeCounters, EVAL_PASSES_PER_BATCH};
use super::optim::{adamw_step, GradMode, Moments, OptimConfig};
use crate::coreset::{ratio_gate, CoresetConfig, GateDecision, PromptCoreset};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorSpec, InputBatch, Prompt, PROMPT_INIT_STD};
use crate::gradcheck::{finite_diff_grad, DEFAULT_STEP};
use crate::stats::{compute_stats, stats_distance, DomainStats, FeatureBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Scratch,
    Refine,
    NoAdapt,
}

impl Path {
    pub fn as_str(&self) -> &'static str {
        match self {
            Path::Scratch => "scratch",
            Path::Refine => "refine",
            Path::NoAdapt => "no_adapt",
        }
    }
}

/// How the refine/new-domain choice is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Ratio,
    /// Every batch after the first refines; the coreset never grows past one.
    AlwaysRefine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDecision {
    pub index: usize,
    pub path: Path,
    pub ratio: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub prompt_used: Option<Prompt>,
    /// Source distance of the prompt-free features.
    pub d_pre: f64,
    /// Source distance of the features used for prediction.
    pub d_post: f64,
    /// Coreset size after the step.
    pub coreset_size: usize,
    pub cost: ComputeCounters,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub features: FeatureBatch,
    pub decision: BatchDecision,
}

/// Output of one single-sample arrival in buffered mode.
#[derive(Debug, Clone)]
pub struct BufferedOutput {
    pub features: FeatureBatch,
    /// Present when the arrival filled the buffer and triggered an update.
    pub decision: Option<BatchDecision>,
}

#[derive(Debug, Clone)]
struct SampleBuffer {
    capacity: usize,
    pending: Vec<InputBatch>,
    current_prompt: Option<Prompt>,
}

/// Everything one adaptation run owns.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub coreset: PromptCoreset,
    source_stats: DomainStats,
    extractor: ExtractorSpec,
    optim: OptimConfig,
    prompt_len: usize,
    gate_mode: GateMode,
    counters: ComputeCounters,
    seed: u64,
    scratch_events: u64,
    batches_seen: usize,
    buffer: Option<SampleBuffer>,
}

impl AdaptState {
    pub fn new(
        extractor: ExtractorSpec,
        source_stats: DomainStats,
        coreset: CoresetConfig,
        optim: OptimConfig,
        prompt_len: usize,
        seed: u64,
    ) -> Result<Self> {
        optim.validate()?;
        if prompt_len == 0 {
            return Err(Error::InvalidParameter("prompt length must be >= 1".into()));
        }
        crate::error::check_dims(extractor.feature_dim(), source_stats.dims())?;
        Ok(Self {
            coreset: PromptCoreset::new(coreset)?,
            source_stats,
            extractor,
            optim,
            prompt_len,
            gate_mode: GateMode::Ratio,
            counters: ComputeCounters::default(),
            seed,
            scratch_events: 0,
            batches_seen: 0,
            buffer: None,
        })
    }

    pub fn with_gate_mode(mut self, mode: GateMode) -> Self {
        self.gate_mode = mode;
        self
    }

    /// Enables buffered single-sample mode with `capacity` samples per update.
    pub fn with_buffer(mut self, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("buffer capacity must be >= 1".into()));
        }
        self.buffer = Some(SampleBuffer { capacity, pending: Vec::new(), current_prompt: None });
        Ok(self)
    }

    /// Replaces the coreset configuration. Only allowed before the first element exists.
    pub fn with_coreset_config(mut self, config: CoresetConfig) -> Result<Self> {
        if !self.coreset.is_empty() {
            return Err(Error::Precondition("coreset already populated".into()));
        }
        self.coreset = PromptCoreset::new(config)?;
        Ok(self)
    }

    pub fn counters(&self) -> &ComputeCounters {
        &self.counters
    }

    pub fn source_stats(&self) -> &DomainStats {
        &self.source_stats
    }

    pub fn extractor(&self) -> &ExtractorSpec {
        &self.extractor
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub(crate) fn source_distance(&self, feats: &FeatureBatch) -> Result<f64> {
        stats_distance(&self.source_stats, &compute_stats(feats)?)
    }

    /// Runs `steps` optimizer steps from `prompt` with fresh moments and
    /// returns the loss seen before each step.
    pub(crate) fn optimize(&mut self, batch: &InputBatch, prompt: &mut Prompt, steps: usize) -> Result<Vec<f64>> {
        let trace = fit_prompt(&self.extractor, batch, &self.source_stats, prompt, &self.optim, steps)?;
        self.counters.optimizer_steps(steps);
        Ok(trace)
    }

    /// Fresh Gaussian prompt for the next scratch event. Each event draws
    /// from its own stream of the run seed.
    pub(crate) fn init_prompt(&mut self) -> Prompt {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.scratch_events);
        self.scratch_events += 1;
        Prompt::gaussian(self.prompt_len, self.extractor.token_dim(), PROMPT_INIT_STD, &mut rng)
    }

    /// Learns a prompt for `batch` from a fresh initialisation. The trace
    /// holds the loss before every step followed by the final loss.
    pub fn learn_prompt_from_scratch(&mut self, batch: &InputBatch) -> Result<(Prompt, Vec<f64>)> {
        let mut prompt = self.init_prompt();
        let steps = self.optim.steps_scratch;
        let mut trace = self.optimize(batch, &mut prompt, steps)?;
        trace.push(self.extractor.alignment_loss(batch, &prompt, &self.source_stats)?);
        Ok((prompt, trace))
    }

    /// One step of the dynamic prompt coreset algorithm on a single-domain batch.
    pub fn dpcore_step(&mut self, batch: &InputBatch) -> Result<StepOutput> {
        let before = self.counters;
        let index = self.batches_seen;
        let plain = self.extractor.extract(batch, None)?;
        let batch_stats = compute_stats(&plain)?;
        let d_pre = stats_distance(&self.source_stats, &batch_stats)?;

        let (path, ratio, weights, prompt) = if self.coreset.is_empty() {
            let (prompt, _) = self.learn_prompt_from_scratch(batch)?;
            self.coreset.add_element(prompt.clone(), batch_stats, index);
            (Path::Scratch, None, None, prompt)
        } else {
            let (weighted, weights) = self.coreset.weighted_prompt(&batch_stats)?;
            let probed = compute_stats(&self.extractor.extract(batch, Some(&weighted))?)?;
            let gate = ratio_gate(&self.source_stats, &batch_stats, &probed, self.coreset.config().rho)?;
            let decision = match self.gate_mode {
                GateMode::Ratio => gate.decision,
                GateMode::AlwaysRefine => GateDecision::Refine,
            };
            match decision {
                GateDecision::Refine => {
                    let mut refined = weighted;
                    let steps = self.optim.steps_refine;
                    self.optimize(batch, &mut refined, steps)?;
                    let alpha = self.coreset.config().alpha;
                    self.coreset.refine_elements(&refined, &batch_stats, &weights, alpha)?;
                    (Path::Refine, gate.ratio, Some(weights), refined)
                }
                GateDecision::NewDomain => {
                    let (prompt, _) = self.learn_prompt_from_scratch(batch)?;
                    self.coreset.add_element(prompt.clone(), batch_stats, index);
                    (Path::Scratch, gate.ratio, Some(weights), prompt)
                }
            }
        };
        self.counters.eval_passes(EVAL_PASSES_PER_BATCH);
        self.counters.batch_done();
        self.batches_seen += 1;

        let features = self.extractor.extract(batch, Some(&prompt))?;
        let d_post = self.source_distance(&features)?;
        let decision = BatchDecision {
            index,
            path,
            ratio,
            weights,
            prompt_used: Some(prompt),
            d_pre,
            d_post,
            coreset_size: self.coreset.len(),
            cost: self.counters.since(&before),
        };
        Ok(StepOutput { features, decision })
    }

    /// Buffered mode: each arrival is predicted with the prompt available at
    /// that moment; a full buffer triggers one [`dpcore_step`](Self::dpcore_step)
    /// on the accumulated samples, and the arrival that filled it is predicted
    /// with the resulting prompt.
    pub fn dpcore_b_step(&mut self, sample: &InputBatch) -> Result<BufferedOutput> {
        let buffer = self
            .buffer
            .as_mut()
            .ok_or_else(|| Error::InvalidParameter("buffer capacity not configured".into()))?;
        buffer.pending.push(sample.clone());
        if buffer.pending.len() < buffer.capacity {
            let current = buffer.current_prompt.clone();
            let features = self.extractor.extract(sample, current.as_ref())?;
            self.counters.eval_passes(1);
            return Ok(BufferedOutput { features, decision: None });
        }
        let pending = std::mem::take(&mut buffer.pending);
        let accumulated = InputBatch::concat(&pending)?;
        let out = self.dpcore_step(&accumulated)?;
        let buffer = self.buffer.as_mut().expect("buffer checked above");
        buffer.current_prompt = out.decision.prompt_used.clone();
        let start = out.features.rows() - sample.rows();
        let tail = out.features.values()[start * out.features.dims()..].to_vec();
        let features = FeatureBatch::new(sample.rows(), out.features.dims(), tail)?;
        Ok(BufferedOutput { features, decision: Some(out.decision) })
    }

    /// Charges `eval_passes` forwards and closes the batch.
    pub(crate) fn charge_batch(&mut self, eval_passes: u64) {
        self.counters.eval_passes(eval_passes);
        self.counters.batch_done();
        self.batches_seen += 1;
    }

    pub fn buffered_len(&self) -> usize {
        self.buffer.as_ref().map_or(0, |b| b.pending.len())
    }

    /// Single-prompt baseline: one prompt learned on the first batch, then
    /// refined by one step per batch and interpolated with weight `alpha`.
    pub fn single_prompt_step(&mut self, batch: &InputBatch, prompt: &mut Option<Prompt>) -> Result<StepOutput> {
        let before = self.counters;
        let index = self.batches_seen;
        let plain = self.extractor.extract(batch, None)?;
        let d_pre = self.source_distance(&plain)?;
        let (path, used) = match prompt {
            None => {
                let learned = self.learn_prompt_from_scratch(batch)?.0;
                *prompt = Some(learned.clone());
                (Path::Scratch, learned)
            }
            Some(current) => {
                let mut refined = current.clone();
                let steps = self.optim.steps_refine;
                self.optimize(batch, &mut refined, steps)?;
                let alpha = self.coreset.config().alpha;
                for (p, t) in current.values_mut().iter_mut().zip(refined.values()) {
                    *p += alpha * (t - *p);
                }
                (Path::Refine, refined)
            }
        };
        self.counters.eval_passes(EVAL_PASSES_PER_BATCH);
        self.counters.batch_done();
        self.batches_seen += 1;
        let features = self.extractor.extract(batch, Some(&used))?;
        let d_post = self.source_distance(&features)?;
        Ok(StepOutput {
            features,
            decision: BatchDecision {
                index,
                path,
                ratio: None,
                weights: None,
                prompt_used: Some(used),
                d_pre,
                d_post,
                coreset_size: 1,
                cost: self.counters.since(&before),
            },
        })
    }
}

fn loss_and_grad(
    extractor: &ExtractorSpec,
    batch: &InputBatch,
    prompt: &Prompt,
    source: &DomainStats,
    mode: GradMode,
) -> Result<(f64, Prompt)> {
    match mode {
        GradMode::Analytic => extractor.alignment_loss_and_grad(batch, prompt, source),
        GradMode::FiniteDiff => {
            let loss = extractor.alignment_loss(batch, prompt, source)?;
            let g = finite_diff_grad(extractor, batch, prompt, source, DEFAULT_STEP)?;
            Ok((loss, g))
        }
    }
}

/// Minimises the alignment loss of `prompt` on `batch` with `steps` AdamW
/// steps from fresh moments. Returns the loss before each step.
pub fn fit_prompt(
    extractor: &ExtractorSpec,
    batch: &InputBatch,
    source: &DomainStats,
    prompt: &mut Prompt,
    optim: &OptimConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut moments = Moments::new(prompt.values().len());
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grad) = loss_and_grad(extractor, batch, prompt, source, optim.grad_mode)?;
        trace.push(loss);
        adamw_step(prompt, &grad, &mut moments, optim)?;
    }
    Ok(trace)
}
