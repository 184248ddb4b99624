//! AdamW for prompt vectors.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::extractor::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Optimizer steps when a prompt is learned from a fresh initialisation.
    pub steps_scratch: usize,
    /// Optimizer steps applied to the weighted prompt on the refine path.
    pub steps_refine: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_mode: GradMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps_scratch: 50,
            steps_refine: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_mode: GradMode::Analytic,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.steps_scratch == 0 || self.steps_refine == 0 {
            return bad("optimizer step counts must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Moments {
    pub fn new(size: usize) -> Self {
        Self { m: vec![0.0; size], v: vec![0.0; size], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(prompt: &mut Prompt, grad: &Prompt, moments: &mut Moments, cfg: &OptimConfig) -> Result<()> {
    check_dims(prompt.values().len(), grad.values().len())?;
    check_dims(prompt.values().len(), moments.m.len())?;
    moments.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(moments.t);
    let bc2 = 1.0 - cfg.beta2.powi(moments.t);
    let params = prompt.values_mut().iter_mut();
    for (((p, &g), m), v) in params.zip(grad.values()).zip(&mut moments.m).zip(&mut moments.v) {
        *p -= cfg.lr * cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
