//! Synthetic source/target domains with a frozen nearest-centroid head.
//!
//! Source samples are `c_y + N(0, noise^2 I)` for `C` class centroids. Target
//! domain `g` applies `x -> s_g * x + t_g` to fresh source draws. Domains come
//! in groups: every domain of a group shares a base shift along one Hadamard
//! direction and adds a small private perturbation, so groups are far apart
//! and domains within a group are close.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapt::{fit_prompt, AdaptState, OptimConfig};
use crate::coreset::CoresetConfig;
use crate::error::{check_dims, Error, Result};
use crate::extractor::{ExtractorKind, ExtractorSpec, InputBatch, Prompt, PROMPT_INIT_STD};
use crate::seed::derive;
use crate::stats::{compute_stats, DomainStats, FeatureBatch};
use crate::streams::DomainStream;

/// Default number of unlabelled source examples behind the reference statistics.
pub const DEFAULT_N_REF: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Off-identity mixing strength of the linear map.
    pub mix_scale: f64,
    /// Hidden width of the tanh network.
    pub hidden: usize,
    /// Output width of the tanh network; the linear map keeps the input width.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { kind: ExtractorKind::LinearAdditive, mix_scale: 0.1, hidden: 32, feature_dim: 16, seed: 7 }
    }
}

impl ExtractorConfig {
    pub fn build(&self, input_dim: usize) -> ExtractorSpec {
        match self.kind {
            ExtractorKind::LinearAdditive => ExtractorSpec::random_linear(input_dim, self.mix_scale, self.seed),
            ExtractorKind::MlpPrepend => ExtractorSpec::random_mlp(input_dim, self.hidden, self.feature_dim, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbedConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Distance of each class centroid from the origin along its own axis.
    pub class_separation: f64,
    pub noise_std: f64,
    /// Number of domains in each group.
    pub group_sizes: Vec<usize>,
    /// Norm of each group's base shift.
    pub group_shift: f64,
    /// Norm of the per-domain perturbation around its group's base shift.
    pub within_group_spread: f64,
    /// Per-group multiplicative scale; empty means all 1.
    pub group_scales: Vec<f64>,
    pub extractor: ExtractorConfig,
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_classes: 8,
            class_separation: 3.5,
            noise_std: 1.0,
            group_sizes: vec![3, 4, 4, 4],
            group_shift: 6.0,
            within_group_spread: 0.6,
            group_scales: Vec::new(),
            extractor: ExtractorConfig::default(),
            seed: 0,
        }
    }
}

impl TestbedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be >= 1");
        }
        if self.num_classes > self.input_dim {
            return bad("num_classes must not exceed input_dim (one centroid axis per class)");
        }
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            return bad("every group needs at least one domain");
        }
        if self.group_sizes.len() >= self.num_classes.next_power_of_two() {
            return bad("too many groups for the shift directions available (at most next_power_of_two(num_classes) - 1)");
        }
        if !self.group_scales.is_empty() && self.group_scales.len() != self.group_sizes.len() {
            return bad("group_scales must be empty or have one entry per group");
        }
        if self.group_scales.iter().any(|s| !(*s > 0.0)) {
            return bad("group scales must be > 0");
        }
        if !(self.noise_std >= 0.0) || !(self.group_shift >= 0.0) || !(self.within_group_spread >= 0.0) {
            return bad("noise and shift magnitudes must be >= 0");
        }
        if self.extractor.kind == ExtractorKind::MlpPrepend && (self.extractor.hidden == 0 || self.extractor.feature_dim == 0) {
            return bad("tanh extractor needs hidden and feature_dim >= 1");
        }
        Ok(())
    }
}

/// Per-domain corruption `x -> scale * x + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCorruption {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub group: usize,
}

pub const DOMAIN_MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainModel {
    pub version: u32,
    pub class_centroids: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub domains: Vec<DomainCorruption>,
}

/// Rows of the Sylvester Hadamard matrix of order `n` (a power of two),
/// normalised to unit length.
fn hadamard_rows(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    let norm = (n as f64).sqrt();
    h.into_iter().map(|r| r.into_iter().map(|v| v / norm).collect()).collect()
}

impl DomainModel {
    pub fn from_config(cfg: &TestbedConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[0x7e57]));
        let class_centroids = (0..cfg.num_classes)
            .map(|k| {
                let mut c = vec![0.0; d];
                c[k] = cfg.class_separation;
                c
            })
            .collect();

        // Shift directions live on the class axes: Hadamard rows without the
        // constant one, so each group moves every centroid by the same amount
        // in a sign pattern no other group shares. A constant shift would be
        // invisible to the classifier.
        let k = cfg.num_classes;
        let mut rows: Vec<Vec<f64>> = hadamard_rows(k.next_power_of_two()).into_iter().skip(1).collect();
        rows.shuffle(&mut rng);
        let mut domains = Vec::new();
        for (g, &size) in cfg.group_sizes.iter().enumerate() {
            let mut dir = vec![0.0; d];
            dir[..k].copy_from_slice(&rows[g][..k]);
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= n);
            let scale = cfg.group_scales.get(g).copied().unwrap_or(1.0);
            for _ in 0..size {
                let mut pert: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let pn = pert.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                pert.iter_mut().for_each(|v| *v *= cfg.within_group_spread / pn);
                let shift = dir.iter().zip(&pert).map(|(a, b)| cfg.group_shift * a + b).collect();
                domains.push(DomainCorruption { scale: vec![scale; d], shift, group: g });
            }
        }
        Ok(Self { version: DOMAIN_MODEL_VERSION, class_centroids, noise_std: cfg.noise_std, domains })
    }

    pub fn input_dim(&self) -> usize {
        self.class_centroids.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.class_centroids.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn group_of(&self, domain: usize) -> usize {
        self.domains[domain].group
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("domain model serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let d = m.input_dim();
        for c in &m.class_centroids {
            check_dims(d, c.len())?;
        }
        for dom in &m.domains {
            check_dims(d, dom.scale.len())?;
            check_dims(d, dom.shift.len())?;
        }
        Ok(m)
    }
}

/// Inputs plus labels. Labels are for the evaluator only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub input: InputBatch,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// Splits into single-sample batches, keeping the hidden domain.
    pub fn split_rows(&self) -> Vec<LabeledBatch> {
        (0..self.rows())
            .map(|i| {
                let mut input = InputBatch::new(1, self.input.dims(), self.input.row(i).to_vec())
                    .expect("row of a valid batch");
                input.hidden_domain = self.input.hidden_domain;
                LabeledBatch { input, labels: vec![self.labels[i]] }
            })
            .collect()
    }
}

fn draw_source<R: Rng>(model: &DomainModel, n: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let d = model.input_dim();
    let noise = Normal::new(0.0, model.noise_std).expect("noise std validated");
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..model.num_classes());
        labels.push(y);
        values.extend(model.class_centroids[y].iter().map(|c| c + noise.sample(rng)));
    }
    (values, labels)
}

pub fn sample_source(model: &DomainModel, n: usize, seed: u64) -> Result<LabeledBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x50]));
    let (values, labels) = draw_source(model, n, &mut rng);
    Ok(LabeledBatch { input: InputBatch::new(n, model.input_dim(), values)?, labels })
}

/// Reference source sample and its prompt-free feature statistics.
pub fn make_source(model: &DomainModel, extractor: &ExtractorSpec, n_ref: usize, seed: u64) -> Result<(LabeledBatch, DomainStats)> {
    if n_ref == 0 {
        return Err(Error::InvalidParameter("n_ref must be >= 1".into()));
    }
    let source = sample_source(model, n_ref, seed)?;
    let stats = compute_stats(&extractor.extract(&source.input, None)?)?;
    Ok((source, stats))
}

/// Fresh source draw pushed through domain `g`'s corruption.
pub fn sample_domain_batch(model: &DomainModel, g: usize, n: usize, seed: u64) -> Result<LabeledBatch> {
    let dom = model
        .domains
        .get(g)
        .ok_or_else(|| Error::InvalidParameter(format!("domain {g} out of range")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xd0, g as u64]));
    let (mut values, labels) = draw_source(model, n, &mut rng);
    let d = model.input_dim();
    for row in values.chunks_exact_mut(d) {
        for ((x, s), t) in row.iter_mut().zip(&dom.scale).zip(&dom.shift) {
            *x = s * *x + t;
        }
    }
    let input = InputBatch::new(n, d, values)?.with_hidden_domain(g);
    Ok(LabeledBatch { input, labels })
}

/// Scores features against labels. Implementations must be stateless.
pub trait Evaluator {
    fn error(&self, features: &FeatureBatch, labels: &[usize]) -> f64;
}

/// Nearest class-centroid rule in feature space, frozen after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidClassifier {
    centroids: Vec<Vec<f64>>,
}

impl CentroidClassifier {
    pub fn fit(features: &FeatureBatch, labels: &[usize], num_classes: usize) -> Result<Self> {
        check_dims(features.rows(), labels.len())?;
        let d = features.dims();
        let mut sums = vec![vec![0.0; d]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (row, &y) in features.iter_rows().zip(labels) {
            if y >= num_classes {
                return Err(Error::InvalidParameter(format!("label {y} >= {num_classes}")));
            }
            counts[y] += 1;
            sums[y].iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Precondition(format!("class {k} has no training samples")));
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Ok(Self { centroids })
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn classify(&self, features: &FeatureBatch) -> Vec<usize> {
        features
            .iter_rows()
            .map(|row| {
                let mut best = (0, f64::INFINITY);
                for (k, c) in self.centroids.iter().enumerate() {
                    let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best.0
            })
            .collect()
    }
}

impl Evaluator for CentroidClassifier {
    fn error(&self, features: &FeatureBatch, labels: &[usize]) -> f64 {
        error_rate(&self.classify(features), labels)
    }
}

pub fn error_rate(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / truth.len() as f64
}

/// Classifier fitted on prompt-free features of a labelled source sample.
pub fn fit_source_classifier(model: &DomainModel, extractor: &ExtractorSpec, n: usize, seed: u64) -> Result<CentroidClassifier> {
    let train = sample_source(model, n, derive(seed, &[0xc1a5]))?;
    let feats = extractor.extract(&train.input, None)?;
    CentroidClassifier::fit(&feats, &train.labels, model.num_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleOptions {
    pub prompt_len: usize,
    /// Samples pooled per domain for learning.
    pub pool_size: usize,
    /// Fresh samples per domain for evaluation.
    pub eval_size: usize,
    pub steps: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { prompt_len: 8, pool_size: 1024, eval_size: 2000, steps: 200, optim: OptimConfig::default(), seed: 1 }
    }
}

/// Prompts learned per domain with the boundaries revealed, and their
/// cross-domain errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTable {
    pub prompts: Vec<Prompt>,
    pub no_prompt_error: Vec<f64>,
    /// `transfer[from][to]`: error on domain `to` using the prompt of `from`.
    pub transfer: Vec<Vec<f64>>,
}

impl OracleTable {
    pub fn own_error(&self, g: usize) -> f64 {
        self.transfer[g][g]
    }
}

pub fn oracle_domain_prompts(
    model: &DomainModel,
    extractor: &ExtractorSpec,
    source: &DomainStats,
    classifier: &dyn Evaluator,
    opts: &OracleOptions,
) -> Result<OracleTable> {
    let m = model.num_domains();
    let mut prompts = Vec::with_capacity(m);
    let mut evals = Vec::with_capacity(m);
    let mut no_prompt_error = Vec::with_capacity(m);
    for g in 0..m {
        let pool = sample_domain_batch(model, g, opts.pool_size, derive(opts.seed, &[1, g as u64]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(opts.seed, &[2, g as u64]));
        let mut prompt = Prompt::gaussian(opts.prompt_len, extractor.token_dim(), PROMPT_INIT_STD, &mut rng);
        fit_prompt(extractor, &pool.input, source, &mut prompt, &opts.optim, opts.steps)?;
        prompts.push(prompt);
        let eval = sample_domain_batch(model, g, opts.eval_size, derive(opts.seed, &[3, g as u64]))?;
        no_prompt_error.push(classifier.error(&extractor.extract(&eval.input, None)?, &eval.labels));
        evals.push(eval);
    }
    let mut transfer = vec![vec![0.0; m]; m];
    for (from, p) in prompts.iter().enumerate() {
        for (to, eval) in evals.iter().enumerate() {
            transfer[from][to] = classifier.error(&extractor.extract(&eval.input, Some(p))?, &eval.labels);
        }
    }
    Ok(OracleTable { prompts, no_prompt_error, transfer })
}

/// Prompt that exactly cancels an input shift `t` under the linear
/// extractor: its tokens sum to `-W t`.
pub fn counteracting_prompt(extractor: &ExtractorSpec, shift: &[f64], len: usize) -> Result<Prompt> {
    let ExtractorSpec::LinearAdditive { weight, .. } = extractor else {
        return Err(Error::InvalidParameter("closed-form prompt needs the linear extractor".into()));
    };
    check_dims(weight.cols, shift.len())?;
    if len == 0 {
        return Err(Error::InvalidParameter("prompt length must be >= 1".into()));
    }
    let mut wt = vec![0.0; weight.rows];
    weight.matvec(shift, &mut wt);
    let token: Vec<f64> = wt.iter().map(|v| -v / len as f64).collect();
    Prompt::new(len, weight.rows, token.repeat(len))
}

/// Draws one labelled batch per stream entry. The same `(domain, batch_id)`
/// always yields the same batch for a given seed, whatever the schedule.
pub fn realize_stream(model: &DomainModel, stream: &DomainStream, batch_size: usize, seed: u64) -> Result<Vec<LabeledBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    stream
        .entries
        .iter()
        .map(|e| sample_domain_batch(model, e.domain, batch_size, derive(seed, &[0xba7c, e.batch_id as u64])))
        .collect()
}

/// A domain model with its frozen extractor, source statistics and head.
#[derive(Debug, Clone)]
pub struct Testbed {
    pub model: DomainModel,
    pub extractor: ExtractorSpec,
    pub source_stats: DomainStats,
    pub classifier: CentroidClassifier,
}

impl Testbed {
    /// Labelled source examples used to fit the head.
    pub const TRAIN_SIZE: usize = 4000;

    pub fn build(cfg: &TestbedConfig, n_ref: usize) -> Result<Self> {
        let model = DomainModel::from_config(cfg)?;
        let extractor = cfg.extractor.build(cfg.input_dim);
        let (_, source_stats) = make_source(&model, &extractor, n_ref, derive(cfg.seed, &[0x5e]))?;
        let classifier = fit_source_classifier(&model, &extractor, Self::TRAIN_SIZE, cfg.seed)?;
        Ok(Self { model, extractor, source_stats, classifier })
    }

    pub fn state(&self, coreset: CoresetConfig, optim: OptimConfig, prompt_len: usize, seed: u64) -> Result<AdaptState> {
        AdaptState::new(self.extractor.clone(), self.source_stats.clone(), coreset, optim, prompt_len, seed)
    }
}
