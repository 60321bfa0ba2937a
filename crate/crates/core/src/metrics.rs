//! Age-estimation metrics: MAE, the Gaussian epsilon-error, and per-class
//! and head/tail breakdowns.

use crate::error::{Error, Result};

pub fn mae(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Validation("MAE over an empty split".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            context: "MAE inputs",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64)
}

/// Mean over samples of `1 - exp(-(p - t)^2 / (2 sigma^2))`.
pub fn epsilon_error(predicted: &[f64], truth: &[f64], sigma: &[f64]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Validation("epsilon-error over an empty split".into()));
    }
    if predicted.len() != truth.len() || predicted.len() != sigma.len() {
        return Err(Error::Shape {
            context: "epsilon-error inputs",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let total: f64 = predicted
        .iter()
        .zip(truth)
        .zip(sigma)
        .map(|((p, t), s)| {
            let d = p - t;
            1.0 - (-(d * d) / (2.0 * s * s)).exp()
        })
        .sum();
    Ok(total / predicted.len() as f64)
}

/// Head and tail thirds of the classes by training count (descending,
/// lower index first on ties). Each third has `max(1, c / 3)` classes.
pub fn head_tail_classes(train_counts: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let c = train_counts.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let k = (c / 3).max(1).min(c);
    let head = order[..k].to_vec();
    let tail = order[c - k..].to_vec();
    (head, tail)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub mae: f64,
    pub epsilon_error: f64,
    /// `None` for classes without samples in the split.
    pub per_class_mae: Vec<Option<f64>>,
    pub head_mae: Option<f64>,
    pub tail_mae: Option<f64>,
}

fn group_mae(errors: &[f64], truth: &[usize], group: &[usize]) -> Option<f64> {
    let picked: Vec<f64> = errors
        .iter()
        .zip(truth)
        .filter(|(_, t)| group.contains(t))
        .map(|(e, _)| *e)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

pub fn summarize(predicted: &[f64], truth: &[usize], sigma: &[f64], train_counts: &[usize]) -> Result<EvalReport> {
    let truth_f: Vec<f64> = truth.iter().map(|&t| t as f64).collect();
    let mae = mae(predicted, &truth_f)?;
    let epsilon_error = epsilon_error(predicted, &truth_f, sigma)?;
    let errors: Vec<f64> = predicted.iter().zip(&truth_f).map(|(p, t)| (p - t).abs()).collect();
    let per_class_mae = (0..train_counts.len())
        .map(|j| group_mae(&errors, truth, &[j]))
        .collect();
    let (head, tail) = head_tail_classes(train_counts);
    Ok(EvalReport {
        samples: predicted.len(),
        mae,
        epsilon_error,
        per_class_mae,
        head_mae: group_mae(&errors, truth, &head),
        tail_mae: group_mae(&errors, truth, &tail),
    })
}
