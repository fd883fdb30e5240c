//! Loss primitives: binary cross entropy, pseudo-forged entropy, feature
//! distillation distance, and their weighted composition.
//!
//! All functions are pure and accumulate in f64 so they can be verified
//! independently of the training path (the trainer computes its gradients in
//! fused f32 form but logs values through these functions).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped into [PROB_CLAMP, 1 - PROB_CLAMP] before any log.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_CLAMP).min(1.0 - PROB_CLAMP)
}

/// Per-batch loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pseudo_entropy: f64,
    pub distill_real: f64,
    pub distill_pseudo: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompose the total from the stored components; equals `total` by
    /// construction and is used as a consistency oracle.
    pub fn recompose(&self) -> f64 {
        self.ce + self.pseudo_entropy + self.beta * (self.distill_real + self.distill_pseudo)
    }
}

/// Mean binary cross entropy between fake-probabilities and {0,1} labels.
pub fn bce(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = clamp_prob(p);
        sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(sum / probs.len() as f64)
}

/// Gradient of `bce` with respect to each probability.
pub fn bce_grad(probs: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

/// Entropy of pseudo-forged samples against the implicit fake label:
/// -mean(log p). Identical to `bce(probs, all-ones)`.
pub fn pseudo_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = probs.iter().map(|&p| -clamp_prob(p).ln()).sum();
    Ok(sum / probs.len() as f64)
}

/// Gradient of `pseudo_entropy` with respect to each probability.
pub fn pseudo_entropy_grad(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = probs.len() as f64;
    Ok(probs.iter().map(|&p| -1.0 / (clamp_prob(p) * n)).collect())
}

/// Normalization mode for the distillation distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DistillNorm {
    /// Batch mean of squared L2 distances (default).
    #[default]
    SquaredL2Mean,
    /// Mean over every element (divides additionally by the feature dim).
    PerElementMse,
}

/// Feature distillation distance between two feature batches.
pub fn feat_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    feat_mse_with(a, b, DistillNorm::SquaredL2Mean)
}

pub fn feat_mse_with(a: &[Vec<f64>], b: &[Vec<f64>], norm: DistillNorm) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("batch {}", a.len()),
            got: format!("batch {}", b.len()),
        });
    }
    let dim = a[0].len();
    let mut sum = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.len() != dim || fb.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("dim {dim}"),
                got: format!("dims {}/{}", fa.len(), fb.len()),
            });
        }
        for (&x, &y) in fa.iter().zip(fb) {
            let d = x - y;
            sum += d * d;
        }
    }
    let denom = match norm {
        DistillNorm::SquaredL2Mean => a.len() as f64,
        DistillNorm::PerElementMse => (a.len() * dim) as f64,
    };
    Ok(sum / denom)
}

/// Gradient of `feat_mse_with` with respect to `a`.
pub fn feat_mse_grad_a(a: &[Vec<f64>], b: &[Vec<f64>], norm: DistillNorm) -> Result<Vec<Vec<f64>>> {
    // reuse the validation path
    let _ = feat_mse_with(a, b, norm)?;
    let dim = a[0].len();
    let denom = match norm {
        DistillNorm::SquaredL2Mean => a.len() as f64,
        DistillNorm::PerElementMse => (a.len() * dim) as f64,
    };
    Ok(a.iter()
        .zip(b)
        .map(|(fa, fb)| {
            fa.iter()
                .zip(fb)
                .map(|(&x, &y)| 2.0 * (x - y) / denom)
                .collect()
        })
        .collect())
}

/// Weighted composition of the four loss terms.
pub fn total_loss(ce: f64, e: f64, l_r: f64, l_p: f64, beta: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("ce", ce),
        ("pseudo_entropy", e),
        ("distill_real", l_r),
        ("distill_pseudo", l_p),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    if beta < 0.0 {
        return Err(Error::InvalidConfig("beta must be >= 0".into()));
    }
    Ok(LossBreakdown {
        ce,
        pseudo_entropy: e,
        distill_real: l_r,
        distill_pseudo: l_p,
        beta,
        total: ce + e + beta * (l_r + l_p),
    })
}
