//! Classification and feature-distillation losses.
//!
//! Distillation losses are interchangeable strategies registered by name;
//! `l2` (mean of per-sample Euclidean distances) is the default and
//! `squared-l2` the squared-distance alternative.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Array, Scalar};

pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−(1/N)·Σ y·ln p + (1−y)·ln(1−p)` with probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "bce: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_term(p, y).0)
        .sum();
    Ok(total / probs.len() as f64)
}

/// Per-sample BCE and its derivative w.r.t. the probability. The derivative
/// is zero where the clamp is active.
pub fn bce_term(p: f64, y: u8) -> (f64, f64) {
    let pc = clamp_prob(p);
    let y = y as f64;
    let value = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let grad = if pc == p {
        -(y / pc) + (1.0 - y) / (1.0 - pc)
    } else {
        0.0
    };
    (value, grad)
}

/// `cls + lambda·kd`
pub fn total_loss(cls: f64, kd: f64, lambda: f64) -> f64 {
    cls + lambda * kd
}

/// Per-sample distance between teacher and student feature vectors.
pub trait DistillLoss: Send + Sync {
    fn name(&self) -> &'static str;

    /// Value for one sample and its gradient w.r.t. the student features.
    fn term(&self, teacher: &[f64], student: &[f64]) -> (f64, Vec<f64>);
}

/// `‖teacher − student‖₂`; the subgradient at zero distance is zero.
pub struct L2Distance;

impl DistillLoss for L2Distance {
    fn name(&self) -> &'static str {
        "l2"
    }

    fn term(&self, teacher: &[f64], student: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = student.iter().zip(teacher).map(|(s, t)| s - t).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, vec![0.0; diff.len()]);
        }
        (norm, diff.iter().map(|d| d / norm).collect())
    }
}

/// `‖teacher − student‖₂²`
pub struct SquaredL2Distance;

impl DistillLoss for SquaredL2Distance {
    fn name(&self) -> &'static str {
        "squared-l2"
    }

    fn term(&self, teacher: &[f64], student: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = student.iter().zip(teacher).map(|(s, t)| s - t).collect();
        (
            diff.iter().map(|d| d * d).sum(),
            diff.iter().map(|d| 2.0 * d).collect(),
        )
    }
}

pub struct DistillLossRegistry {
    entries: BTreeMap<&'static str, Box<dyn DistillLoss>>,
}

impl DistillLossRegistry {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, loss: Box<dyn DistillLoss>) {
        self.entries.insert(loss.name(), loss);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DistillLoss> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::invalid(format!(
                "unknown distillation loss {name:?}; known: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl Default for DistillLossRegistry {
    fn default() -> Self {
        let mut r = Self::new();
        r.register(Box::new(L2Distance));
        r.register(Box::new(SquaredL2Distance));
        r
    }
}

/// Batch distillation loss: mean over rows of `loss.term`. Both arrays are
/// `N×d`.
pub fn kd_loss<T: Scalar>(teacher: &Array<T>, student: &Array<T>, loss: &dyn DistillLoss) -> Result<f64> {
    teacher.expect_same_shape(student, "kd_loss features")?;
    let (n, d) = match teacher.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape(format!("kd_loss expects N×d features, got {s:?}"))),
    };
    let to64 = |a: &Array<T>, i: usize| -> Vec<f64> {
        a.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64()).collect()
    };
    let total: f64 = (0..n)
        .map(|i| loss.term(&to64(teacher, i), &to64(student, i)).0)
        .sum();
    Ok(total / n as f64)
}
