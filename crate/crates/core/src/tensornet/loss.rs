//! Softmax and the alpha-balanced categorical focal loss.
//!
//! For a softmax output `s` and target class `t` with `p = s[t]`:
//!
//! ```text
//! loss = alpha[t] · (1 − p)^gamma · (−ln p)
//! ```
//!
//! The gradient is taken with respect to the pre-softmax logits `z`:
//!
//! ```text
//! ∂loss/∂z_j = alpha[t] · (gamma · (1 − p)^(gamma−1) · p · ln p − (1 − p)^gamma) · (δ_tj − s_j)
//! ```
//!
//! which never divides by `p`.

use serde::{Deserialize, Serialize};

use super::NetError;

/// Floor applied to the target probability before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalConfig {
    /// Plain categorical cross-entropy over `classes` classes.
    pub fn cross_entropy(classes: usize) -> Self {
        Self {
            gamma: 0.0,
            alpha: vec![1.0; classes],
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(NetError::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(NetError::Config(format!("alpha must be finite and > 0, got {:?}", self.alpha)));
        }
        Ok(())
    }
}

/// Alpha weights proportional to inverse class frequency, normalized to mean 1.
/// Classes with zero support receive the largest weight among the others.
pub fn inverse_frequency_alpha(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let max = inv.iter().flatten().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![1.0; counts.len()];
    }
    let raw: Vec<f64> = inv.iter().map(|v| v.unwrap_or(max)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|v| v / mean).collect()
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Categorical cross-entropy `−ln p_target` with the probability floor applied.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].max(PROB_FLOOR).ln()
}

/// Focal loss of a softmax output and its gradient with respect to the logits.
pub fn focal_loss(probs: &[f64], target: usize, cfg: &FocalConfig) -> Result<(f64, Vec<f64>), NetError> {
    if target >= probs.len() {
        return Err(NetError::Input(format!("target {target} out of range for {} classes", probs.len())));
    }
    if cfg.alpha.len() != probs.len() {
        return Err(NetError::Config(format!(
            "alpha has {} entries for {} classes",
            cfg.alpha.len(),
            probs.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(NetError::Input(format!("probabilities must sum to 1 (got {total})")));
    }
    let alpha = cfg.alpha[target];
    let gamma = cfg.gamma;
    let p = probs[target].max(PROB_FLOOR);
    let q = (1.0 - probs[target]).max(0.0);
    let log_p = p.ln();
    let modulating = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = alpha * modulating * (-log_p);

    // d(loss)/dp · p, finite at p → 1 for every gamma ≥ 0
    let focus_term = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p * log_p
    };
    let coeff = alpha * (focus_term - modulating);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &s)| coeff * (if j == target { 1.0 } else { 0.0 } - s))
        .collect();
    Ok((loss, grad))
}
