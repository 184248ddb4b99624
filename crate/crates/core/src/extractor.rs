//! Frozen feature extractors with prompt injection.
//!
//! Two backbones stand in for a prompted transformer:
//!
//! * [`ExtractorSpec::LinearAdditive`]: `z = W x + sum_l p_l`. The prompt lives
//!   in feature space and can only translate the feature distribution.
//! * [`ExtractorSpec::MlpPrepend`]: `z = W2 tanh(W1 (x + mean_l p_l) + b1) + b2`.
//!   The prompt lives in input space; the alignment loss is non-convex.
//!
//! Both provide the alignment loss `d(source, stats(extract(batch, prompt)))`
//! together with its exact gradient with respect to the prompt.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::stats::{compute_stats, stats_distance, DomainStats, FeatureBatch, STD_FLOOR};

/// Standard deviation of freshly initialised prompt tokens.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// `len` learnable tokens of dimension `token_dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    len: usize,
    token_dim: usize,
    values: Vec<f64>,
}

impl Prompt {
    pub fn new(len: usize, token_dim: usize, values: Vec<f64>) -> Result<Self> {
        if len == 0 || token_dim == 0 {
            return Err(Error::InvalidParameter("prompt needs at least one token of dimension >= 1".into()));
        }
        check_dims(len * token_dim, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt"));
        }
        Ok(Self { len, token_dim, values })
    }

    pub fn zeros(len: usize, token_dim: usize) -> Self {
        assert!(len > 0 && token_dim > 0, "empty prompt shape");
        Self { len, token_dim, values: vec![0.0; len * token_dim] }
    }

    /// I.i.d. `N(0, std^2)` tokens.
    pub fn gaussian<R: Rng + ?Sized>(len: usize, token_dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("prompt init std must be finite and >= 0");
        let values = (0..len * token_dim).map(|_| normal.sample(rng)).collect();
        Self { len, token_dim, values }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn token(&self, l: usize) -> &[f64] {
        &self.values[l * self.token_dim..(l + 1) * self.token_dim]
    }

    pub fn same_shape(&self, other: &Prompt) -> bool {
        self.len == other.len && self.token_dim == other.token_dim
    }

    /// Sum over tokens, the aggregate effect of an additive prompt.
    pub fn token_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.token_dim];
        for tok in self.values.chunks_exact(self.token_dim) {
            for (o, t) in out.iter_mut().zip(tok) {
                *o += t;
            }
        }
        out
    }

    pub fn token_mean(&self) -> Vec<f64> {
        let n = self.len as f64;
        self.token_sum().into_iter().map(|v| v / n).collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn from_parts_unchecked(len: usize, token_dim: usize, values: Vec<f64>) -> Self {
        Self { len, token_dim, values }
    }
}

/// Unlabelled input batch. `hidden_domain` exists for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    rows: usize,
    dims: usize,
    values: Vec<f64>,
    pub hidden_domain: Option<usize>,
}

impl InputBatch {
    pub fn new(rows: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidParameter("input dimension must be >= 1".into()));
        }
        check_dims(rows * dims, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input batch"));
        }
        Ok(Self { rows, dims, values, hidden_domain: None })
    }

    pub fn with_hidden_domain(mut self, domain: usize) -> Self {
        self.hidden_domain = Some(domain);
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dims)
    }

    /// Stacks batches row-wise; the hidden label is kept only if all agree.
    pub fn concat(batches: &[InputBatch]) -> Result<Self> {
        let first = batches.first().ok_or(Error::EmptyBatch)?;
        let dims = first.dims;
        let mut values = Vec::new();
        let mut rows = 0;
        for b in batches {
            check_dims(dims, b.dims)?;
            values.extend_from_slice(&b.values);
            rows += b.rows;
        }
        let label = first.hidden_domain.filter(|d| batches.iter().all(|b| b.hidden_domain == Some(*d)));
        Ok(Self { rows, dims, values, hidden_domain: label })
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self^T y`
    pub fn add_matvec_t(&self, y: &[f64], out: &mut [f64]) {
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    LinearAdditive,
    MlpPrepend,
}

/// Frozen backbone parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSpec {
    LinearAdditive {
        weight: Matrix,
        seed: Option<u64>,
    },
    MlpPrepend {
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        seed: Option<u64>,
    },
}

impl ExtractorSpec {
    pub fn linear(weight: Matrix) -> Self {
        Self::LinearAdditive { weight, seed: None }
    }

    /// `W = I + scale * N(0, 1/d)`.
    pub fn random_linear(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Matrix::identity(dim);
        let sd = scale / (dim as f64).sqrt();
        for w in &mut weight.data {
            let g: f64 = StandardNormal.sample(&mut rng);
            *w += sd * g;
        }
        Self::LinearAdditive { weight, seed: Some(seed) }
    }

    /// Glorot-style random weights for a one-hidden-layer tanh network.
    pub fn random_mlp(input_dim: usize, hidden: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let sd = (2.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            Matrix { rows, cols, data }
        };
        let w1 = draw(hidden, input_dim);
        let w2 = draw(feature_dim, hidden);
        let b1 = (0..hidden).map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let b2 = vec![0.0; feature_dim];
        Self::MlpPrepend { w1, b1, w2, b2, seed: Some(seed) }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Self::LinearAdditive { .. } => ExtractorKind::LinearAdditive,
            Self::MlpPrepend { .. } => ExtractorKind::MlpPrepend,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::LinearAdditive { weight, .. } => weight.cols,
            Self::MlpPrepend { w1, .. } => w1.cols,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::LinearAdditive { weight, .. } => weight.rows,
            Self::MlpPrepend { w2, .. } => w2.rows,
        }
    }

    /// Dimension of one prompt token.
    pub fn token_dim(&self) -> usize {
        match self {
            Self::LinearAdditive { weight, .. } => weight.rows,
            Self::MlpPrepend { w1, .. } => w1.cols,
        }
    }

    fn check_inputs(&self, batch: &InputBatch, prompt: Option<&Prompt>) -> Result<()> {
        check_dims(self.input_dim(), batch.dims())?;
        if let Some(p) = prompt {
            check_dims(self.token_dim(), p.token_dim())?;
        }
        Ok(())
    }

    /// Features of `batch`; `None` is the prompt-free path.
    pub fn extract(&self, batch: &InputBatch, prompt: Option<&Prompt>) -> Result<FeatureBatch> {
        self.check_inputs(batch, prompt)?;
        let df = self.feature_dim();
        let mut out = vec![0.0; batch.rows() * df];
        match self {
            Self::LinearAdditive { weight, .. } => {
                let offset = prompt.map(Prompt::token_sum);
                for (x, z) in batch.iter_rows().zip(out.chunks_exact_mut(df)) {
                    weight.matvec(x, z);
                    if let Some(off) = &offset {
                        z.iter_mut().zip(off).for_each(|(zi, o)| *zi += o);
                    }
                }
            }
            Self::MlpPrepend { w1, b1, w2, b2, .. } => {
                let shift = prompt.map(Prompt::token_mean);
                let mut xin = vec![0.0; batch.dims()];
                let mut hidden = vec![0.0; w1.rows];
                for (x, z) in batch.iter_rows().zip(out.chunks_exact_mut(df)) {
                    mlp_hidden(w1, b1, x, shift.as_deref(), &mut xin, &mut hidden);
                    w2.matvec(&hidden, z);
                    z.iter_mut().zip(b2).for_each(|(zi, b)| *zi += b);
                }
            }
        }
        FeatureBatch::new(batch.rows(), df, out)
    }

    pub fn alignment_loss(&self, batch: &InputBatch, prompt: &Prompt, source: &DomainStats) -> Result<f64> {
        let feats = self.extract(batch, Some(prompt))?;
        stats_distance(source, &compute_stats(&feats)?)
    }

    /// Alignment loss and its gradient with respect to every prompt entry.
    pub fn alignment_loss_and_grad(
        &self,
        batch: &InputBatch,
        prompt: &Prompt,
        source: &DomainStats,
    ) -> Result<(f64, Prompt)> {
        let feats = self.extract(batch, Some(prompt))?;
        check_dims(source.dims(), feats.dims())?;
        let stats = compute_stats(&feats)?;
        let loss = stats_distance(source, &stats)?;
        let g_mean = unit_residual(&stats.mean, &source.mean);
        let g_std = unit_residual(&stats.std, &source.std);

        let mut grad = vec![0.0; prompt.values().len()];
        match self {
            Self::LinearAdditive { .. } => {
                // A translation leaves every std untouched, so only the mean
                // term reaches the prompt.
                for tok in grad.chunks_exact_mut(prompt.token_dim()) {
                    tok.copy_from_slice(&g_mean);
                }
            }
            Self::MlpPrepend { w1, b1, w2, .. } => {
                let n = feats.rows() as f64;
                let shift = prompt.token_mean();
                let mut xin = vec![0.0; batch.dims()];
                let mut hidden = vec![0.0; w1.rows];
                let mut dz = vec![0.0; feats.dims()];
                let mut dh = vec![0.0; w1.rows];
                let mut dx_total = vec![0.0; batch.dims()];
                for (i, x) in batch.iter_rows().enumerate() {
                    let z = feats.row(i);
                    for k in 0..dz.len() {
                        let std_part = if stats.std[k] > STD_FLOOR {
                            g_std[k] * (z[k] - stats.mean[k]) / stats.std[k]
                        } else {
                            0.0
                        };
                        dz[k] = (g_mean[k] + std_part) / n;
                    }
                    mlp_hidden(w1, b1, x, Some(&shift), &mut xin, &mut hidden);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    w2.add_matvec_t(&dz, &mut dh);
                    for (d, h) in dh.iter_mut().zip(&hidden) {
                        *d *= 1.0 - h * h;
                    }
                    w1.add_matvec_t(&dh, &mut dx_total);
                }
                let per_token = 1.0 / prompt.len() as f64;
                for tok in grad.chunks_exact_mut(prompt.token_dim()) {
                    for (g, d) in tok.iter_mut().zip(&dx_total) {
                        *g = d * per_token;
                    }
                }
            }
        }
        Ok((loss, Prompt::from_parts_unchecked(prompt.len(), prompt.token_dim(), grad)))
    }
}

fn mlp_hidden(w1: &Matrix, b1: &[f64], x: &[f64], shift: Option<&[f64]>, xin: &mut [f64], hidden: &mut [f64]) {
    xin.copy_from_slice(x);
    if let Some(s) = shift {
        xin.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    w1.matvec(xin, hidden);
    for (h, b) in hidden.iter_mut().zip(b1) {
        *h = (*h + b).tanh();
    }
}

/// `(a - b) / ||a - b||`, or zero at the kink.
fn unit_residual(a: &[f64], b: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff.into_iter().map(|v| v / norm).collect()
    } else {
        diff.into_iter().map(|_| 0.0).collect()
    }
}
