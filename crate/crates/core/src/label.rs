//! Gaussian label distributions over ordinal classes and the decoders that
//! turn predicted distributions back into scalar ages.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability passed to `ln`.
pub const LOG_FLOOR: f64 = 1e-300;

/// Unnormalized Gaussian density at class `k` for true age `age`.
pub fn gaussian_density(k: f64, age: f64, sigma: f64) -> f64 {
    let d = k - age;
    (-(d * d) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Soft target over `c` classes, peaked at the true age.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
    sigma: f64,
    age: usize,
}

impl LabelDistribution {
    /// Samples the Gaussian at every class index and renormalizes so the
    /// truncated support sums to one.
    pub fn encode(age: usize, sigma: f64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Range(format!("need at least 2 classes, got {classes}")));
        }
        if age >= classes {
            return Err(Error::Range(format!(
                "age {age} outside [0, {}]",
                classes - 1
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("label sigma must be positive, got {sigma}")));
        }
        let mut probs: Vec<f64> = (0..classes)
            .map(|k| gaussian_density(k as f64, age as f64, sigma))
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(LabelDistribution { probs, sigma, age })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn age(&self) -> usize {
        self.age
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Expectation,
    Argmax,
}

impl Decoder {
    pub fn decode(self, probs: &[f64]) -> Result<f64> {
        match self {
            Decoder::Expectation => decode_expectation(probs),
            Decoder::Argmax => decode_argmax(probs),
        }
    }
}

fn validate_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Validation("empty probability vector".into()));
    }
    if let Some((k, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(Error::Validation(format!("component {k} is {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Expected class index `sum_k k * p_k`.
pub fn decode_expectation(probs: &[f64]) -> Result<f64> {
    validate_distribution(probs)?;
    Ok(probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum())
}

/// Index of the largest component (lowest index on ties).
pub fn decode_argmax(probs: &[f64]) -> Result<f64> {
    validate_distribution(probs)?;
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    Ok(best as f64)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy part of the KL objective and its gradient with respect to
/// the logits that produced `predicted` through a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct KlLoss {
    pub loss: f64,
    pub d_logits: Vec<f64>,
}

/// `-sum_k y_k ln(p_k)`, the target entropy term dropped. Zero predicted
/// components are floored at [`LOG_FLOOR`] before the logarithm.
pub fn kl_loss(target: &LabelDistribution, predicted: &[f64]) -> Result<KlLoss> {
    if predicted.len() != target.classes() {
        return Err(Error::Shape {
            context: "predicted distribution",
            expected: target.classes(),
            actual: predicted.len(),
        });
    }
    if let Some((k, p)) = predicted.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(Error::NonFinite(format!("predicted component {k} is {p}")));
    }
    let loss = -target
        .probs()
        .iter()
        .zip(predicted)
        .map(|(y, p)| if *y == 0.0 { 0.0 } else { y * p.max(LOG_FLOOR).ln() })
        .sum::<f64>();
    let d_logits = predicted
        .iter()
        .zip(target.probs())
        .map(|(p, y)| p - y)
        .collect();
    Ok(KlLoss { loss, d_logits })
}
