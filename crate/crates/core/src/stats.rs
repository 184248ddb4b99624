//! Feature-batch moments and the statistics-space distance.
//!
//! Every alignment, weighting and gating decision in the engine is expressed
//! through [`stats_distance`] between two [`DomainStats`] fingerprints.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Lower bound applied to every per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Row-major `rows x dims` matrix of extracted features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    rows: usize,
    dims: usize,
    values: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(rows: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidParameter("feature dimension must be >= 1".into()));
        }
        check_dims(rows * dims, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature batch"));
        }
        Ok(Self { rows, dims, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dims);
        for row in rows {
            check_dims(dims, row.len())?;
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), dims, values)
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
}

/// Per-dimension mean and standard deviation of a feature batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DomainStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dims(mean.len(), std.len())?;
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("domain statistics"));
        }
        if std.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParameter("standard deviation must be >= 0".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and population standard deviations, the latter floored at
/// [`STD_FLOOR`].
pub fn compute_stats(batch: &FeatureBatch) -> Result<DomainStats> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = batch.rows() as f64;
    let d = batch.dims();
    let mut mean = vec![0.0; d];
    for row in batch.iter_rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut var = vec![0.0; d];
    for row in batch.iter_rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(DomainStats { mean, std })
}

pub(crate) fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `||mu_a - mu_b||_2 + ||sigma_a - sigma_b||_2`.
pub fn stats_distance(a: &DomainStats, b: &DomainStats) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    check_dims(a.std.len(), b.std.len())?;
    Ok(l2_dist(&a.mean, &b.mean) + l2_dist(&a.std, &b.std))
}

/// Softmax of `-d / tau`, computed with max-subtraction.
pub fn softmax_weights(distances: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be > 0, got {tau}")));
    }
    if distances.is_empty() {
        return Err(Error::InvalidParameter("no distances to weight".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("distances"));
    }
    let logits: Vec<f64> = distances.iter().map(|d| -d / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats(mean: &[f64], std: &[f64]) -> DomainStats {
        DomainStats::new(mean.to_vec(), std.to_vec()).unwrap()
    }

    #[test]
    fn two_point_moments() {
        let b = FeatureBatch::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        let s = compute_stats(&b).unwrap();
        assert_eq!(s.mean, vec![2.0, 4.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
    }

    #[test]
    fn single_row_hits_floor() {
        let b = FeatureBatch::from_rows(&[vec![7.0, 7.0]]).unwrap();
        let s = compute_stats(&b).unwrap();
        assert_eq!(s.mean, vec![7.0, 7.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let b = FeatureBatch::new(0, 3, vec![]).unwrap();
        assert_eq!(compute_stats(&b), Err(Error::EmptyBatch));
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (10_000, 4);
        let values: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = compute_stats(&FeatureBatch::new(n, d, values).unwrap()).unwrap();
        assert!(s.mean.iter().all(|m| m.abs() <= 0.05), "{:?}", s.mean);
        assert!(s.std.iter().all(|v| (v - 1.0).abs() <= 0.05), "{:?}", s.std);
    }

    #[test]
    fn distance_examples() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(stats_distance(&a, &a).unwrap(), 0.0);
        let b = stats(&[3.0, 4.0], &[1.0, 1.0]);
        assert_eq!(stats_distance(&a, &b).unwrap(), 5.0);
        let c = stats(&[0.0], &[1.0]);
        let e = stats(&[0.0], &[2.0]);
        assert_eq!(stats_distance(&c, &e).unwrap(), 1.0);
        assert!(matches!(stats_distance(&a, &c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_weights(&[2.0; 4], 1.0).unwrap(), vec![0.25; 4]);
        assert_eq!(softmax_weights(&[5.0], 0.3).unwrap(), vec![1.0]);
        // e^0 / (e^0 + e^-1) evaluated directly
        let e1 = (-1.0f64).exp();
        let expected = [1.0 / (1.0 + e1), e1 / (1.0 + e1)];
        let w = softmax_weights(&[0.0, 1.0], 1.0).unwrap();
        assert!((w[0] - 0.731059).abs() < 1e-6 && (w[0] - expected[0]).abs() < 1e-15);
        assert!((w[1] - 0.268941).abs() < 1e-6 && (w[1] - expected[1]).abs() < 1e-15);
        assert!(softmax_weights(&[1.0], 0.0).is_err());
        assert!(softmax_weights(&[1.0], -1.0).is_err());
        assert!(softmax_weights(&[], 1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_distances() {
        let w = softmax_weights(&[1e6, 1e6 + 1.0], 1e-3).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    fn arb_stats(d: usize) -> impl Strategy<Value = DomainStats> {
        (
            prop::collection::vec(-10.0..10.0f64, d),
            prop::collection::vec(0.0..5.0f64, d),
        )
            .prop_map(|(m, s)| DomainStats::new(m, s).unwrap())
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in arb_stats(3), b in arb_stats(3), c in arb_stats(3)) {
            let ab = stats_distance(&a, &b).unwrap();
            let ba = stats_distance(&b, &a).unwrap();
            let ac = stats_distance(&a, &c).unwrap();
            let bc = stats_distance(&b, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn softmax_shift_invariant(d in prop::collection::vec(0.0..20.0f64, 1..8), shift in -50.0..50.0f64, tau in 0.1..5.0f64) {
            let w = softmax_weights(&d, tau).unwrap();
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            let ws = softmax_weights(&shifted, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in w.iter().zip(&ws) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_smaller_distance_gains_weight(d in prop::collection::vec(0.0..20.0f64, 2..8), k in 0usize..8, dec in 0.01..3.0f64) {
            let k = k % d.len();
            let w = softmax_weights(&d, 1.0).unwrap();
            let mut d2 = d.clone();
            d2[k] -= dec;
            let w2 = softmax_weights(&d2, 1.0).unwrap();
            prop_assert!(w2[k] > w[k]);
        }

        #[test]
        fn moments_permutation_invariant(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = compute_stats(&FeatureBatch::from_rows(&rows).unwrap()).unwrap();
            let b = compute_stats(&FeatureBatch::from_rows(&shuffled).unwrap()).unwrap();
            prop_assert!(stats_distance(&a, &b).unwrap() < 1e-9);
        }
    }
}
