//! Central finite differences, used as an independent oracle for the
//! analytic prompt gradients.

use crate::error::Result;
use crate::extractor::{ExtractorSpec, InputBatch, Prompt};
use crate::stats::DomainStats;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate of `prompt`.
pub fn finite_diff<F>(mut loss: F, prompt: &Prompt, h: f64) -> Result<Prompt>
where
    F: FnMut(&Prompt) -> Result<f64>,
{
    let mut probe = prompt.clone();
    let mut grad = Vec::with_capacity(prompt.values().len());
    for i in 0..prompt.values().len() {
        let orig = prompt.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.values_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.values_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Prompt::new(prompt.len(), prompt.token_dim(), grad)
}

/// Finite-difference gradient of the alignment loss.
pub fn finite_diff_grad(
    spec: &ExtractorSpec,
    batch: &InputBatch,
    prompt: &Prompt,
    source: &DomainStats,
    h: f64,
) -> Result<Prompt> {
    finite_diff(|p| spec.alignment_loss(batch, p, source), prompt, h)
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &Prompt, b: &Prompt, floor: f64) -> f64 {
    let diff: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::Matrix;
    use crate::stats::compute_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quadratic_derivative() {
        let p = Prompt::new(1, 1, vec![1.0]).unwrap();
        let g = finite_diff(|q| Ok(q.values()[0].powi(2)), &p, DEFAULT_STEP).unwrap();
        assert!((g.values()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_at_minimum() {
        let p = Prompt::new(1, 2, vec![0.5, -0.5]).unwrap();
        let g = finite_diff(
            |q| Ok((q.values()[0] - 0.5).powi(2) + (q.values()[1] + 0.5).powi(2)),
            &p,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(g.norm() < 1e-9);
    }

    #[test]
    fn agrees_with_linear_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ExtractorSpec::random_linear(5, 0.4, 1);
        let values = (0..40 * 5).map(|_| StandardNormal.sample(&mut rng)).collect();
        let batch = InputBatch::new(40, 5, values).unwrap();
        let mut source = compute_stats(&spec.extract(&batch, None).unwrap()).unwrap();
        source.mean.iter_mut().for_each(|m| *m += 1.5);
        let p = Prompt::gaussian(3, 5, 0.02, &mut rng);
        let (_, g) = spec.alignment_loss_and_grad(&batch, &p, &source).unwrap();
        let fd = finite_diff_grad(&spec, &batch, &p, &source, DEFAULT_STEP).unwrap();
        assert!(relative_error(&g, &fd, 1e-12) <= 1e-5);
    }

    #[test]
    fn identity_matrix_helper() {
        assert_eq!(Matrix::identity(2).data, vec![1.0, 0.0, 0.0, 1.0]);
    }
}
