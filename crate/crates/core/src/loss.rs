//! One-vs-all margined softmax and its cross-entropy against a soft target.
//!
//! Component `k` of the prediction subtracts only its own margin:
//!
//! ```text
//! p_k = exp(s_k - m_k) / (exp(s_k - m_k) + sum_{t != k} exp(s_t))
//! ```
//!
//! The components are separate two-way softmaxes and need not sum to one
//! unless every margin is zero.

use crate::error::{Error, Result};
use crate::label::{LabelDistribution, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct MarginedPrediction {
    logits: Vec<f64>,
    margins: Vec<f64>,
    components: Vec<f64>,
    /// `ln p_k`, computed without going through `p_k`.
    log_components: Vec<f64>,
    /// `1 - p_k`, computed without cancellation.
    complements: Vec<f64>,
    /// Shifted `exp(s_t - shift)` and `1 / Z_k` in the same shifted units,
    /// kept for the gradient.
    shifted_exp: Vec<f64>,
    inv_denominators: Vec<f64>,
}

impl MarginedPrediction {
    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn log_components(&self) -> &[f64] {
        &self.log_components
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    pub fn classes(&self) -> usize {
        self.logits.len()
    }
}

pub fn predict_margined(logits: &[f64], margins: &[f64]) -> Result<MarginedPrediction> {
    let c = logits.len();
    if margins.len() != c {
        return Err(Error::Shape {
            context: "margin vector",
            expected: c,
            actual: margins.len(),
        });
    }
    if c < 2 {
        return Err(Error::Range(format!("need at least 2 classes, got {c}")));
    }
    if let Some(v) = logits.iter().chain(margins).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit or margin {v}")));
    }

    let shifted_targets: Vec<f64> = logits.iter().zip(margins).map(|(s, m)| s - m).collect();
    let shift = logits
        .iter()
        .chain(&shifted_targets)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|s| (s - shift).exp()).collect();

    // rest[k] = sum_{t != k} e_t from prefix and suffix sums
    let mut rest = vec![0.0; c];
    let mut prefix = 0.0;
    for k in 0..c {
        rest[k] = prefix;
        prefix += e[k];
    }
    let mut suffix = 0.0;
    for k in (0..c).rev() {
        rest[k] += suffix;
        suffix += e[k];
    }

    let mut components = Vec::with_capacity(c);
    let mut log_components = Vec::with_capacity(c);
    let mut complements = Vec::with_capacity(c);
    let mut inv_denominators = Vec::with_capacity(c);
    for k in 0..c {
        let u = shifted_targets[k] - shift;
        let a = u.exp();
        let z = a + rest[k];
        components.push(a / z);
        complements.push(rest[k] / z);
        inv_denominators.push(1.0 / z);
        // ln p_k = u - ln(e^u + rest)
        let log_z = if rest[k] == 0.0 {
            u
        } else {
            let (hi, lo) = if u >= rest[k].ln() {
                (u, rest[k].ln())
            } else {
                (rest[k].ln(), u)
            };
            hi + (lo - hi).exp().ln_1p()
        };
        log_components.push(u - log_z);
    }

    Ok(MarginedPrediction {
        logits: logits.to_vec(),
        margins: margins.to_vec(),
        components,
        log_components,
        complements,
        shifted_exp: e,
        inv_denominators,
    })
}

/// Per-sample loss and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub d_margins: Vec<f64>,
}

/// `-sum_k y_k ln p_k` for one sample, with gradients for logits and margins.
pub fn pml_loss(target: &LabelDistribution, pred: &MarginedPrediction) -> Result<SampleLoss> {
    let c = pred.classes();
    if target.classes() != c {
        return Err(Error::Shape {
            context: "target distribution",
            expected: c,
            actual: target.classes(),
        });
    }
    let y = target.probs();
    let log_floor = LOG_FLOOR.ln();
    let loss = -y
        .iter()
        .zip(&pred.log_components)
        .map(|(yk, lp)| if *yk == 0.0 { 0.0 } else { yk * lp.max(log_floor) })
        .sum::<f64>();

    // dL/dm_k = y_k (1 - p_k)
    let d_margins: Vec<f64> = y.iter().zip(&pred.complements).map(|(yk, q)| yk * q).collect();

    // dL/ds_t = -y_t (1 - p_t) + e_t * sum_{k != t} y_k / Z_k
    let weighted: f64 = y.iter().zip(&pred.inv_denominators).map(|(yk, iz)| yk * iz).sum();
    let d_logits = (0..c)
        .map(|t| {
            let others = weighted - y[t] * pred.inv_denominators[t];
            -d_margins[t] + pred.shifted_exp[t] * others
        })
        .collect();

    Ok(SampleLoss {
        loss,
        d_logits,
        d_margins,
    })
}
