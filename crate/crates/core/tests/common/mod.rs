//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it checks.
#![allow(dead_code)]

use pml::label::LabelDistribution;
use pml::margin::{MarginConfig, MarginMix};
use pml::matrix::Matrix;
use pml::model::{ModelShape, PmlModel};
use pml::stats::{SnapshotTag, StatsSnapshot};
use pml::train::{batch_objective, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-class means by summing then dividing.
pub fn two_pass_means(stream: &[(usize, Vec<f64>)], classes: usize, dim: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (j, x) in stream {
        counts[*j] += 1;
        for (s, v) in sums[*j].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// `1 - cos`, with separately computed norms; zero-norm pairs give 0.
pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cos = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum::<f64>();
    1.0 - cos.clamp(-1.0, 1.0)
}

/// Replays the intra-class accumulator one term at a time, with centers
/// recomputed from prefix sums.
pub fn replay_accumulator(stream: &[(usize, Vec<f64>)], classes: usize, dim: usize) -> Vec<f64> {
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    let mut acc = vec![0.0; classes];
    for (j, x) in stream {
        let before: Vec<f64> = if counts[*j] == 0 {
            x.clone()
        } else {
            sums[*j].iter().map(|s| s / counts[*j] as f64).collect()
        };
        counts[*j] += 1;
        for (s, v) in sums[*j].iter_mut().zip(x) {
            *s += v;
        }
        let after: Vec<f64> = sums[*j].iter().map(|s| s / counts[*j] as f64).collect();
        acc[*j] += cosine_oracle(x, &before) * cosine_oracle(x, &after);
    }
    acc
}

pub fn random_stream(rng: &mut ChaCha8Rng, n: usize, classes: usize, dim: usize) -> Vec<(usize, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let j = rng.gen_range(0..classes);
            let x = (0..dim).map(|_| rng.gen_range(-3.0..3.0) + j as f64 * 0.1).collect();
            (j, x)
        })
        .collect()
}

/// Mean of `exp(-(k - a)^2 / (2 s^2))`-weighted indices over `0..c`,
/// summed directly.
pub fn truncated_gaussian_mean(age: usize, sigma: f64, classes: usize) -> f64 {
    let w: Vec<f64> = (0..classes)
        .map(|k| {
            let d = k as f64 - age as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / z
}

/// A small, fully random instance of the training graph: backbone, head,
/// both margin networks, with detached statistics.
pub struct GraphInstance {
    pub model: PmlModel,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<LabelDistribution>,
    pub snapshot: StatsSnapshot,
    pub delta: Matrix,
    pub margins: MarginConfig,
    pub mix: MarginMix,
}

impl GraphInstance {
    pub fn random(seed: u64) -> GraphInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = rng.gen_range(3..7);
        let shape = ModelShape {
            input_dim: rng.gen_range(2..6),
            hidden_width: rng.gen_range(3..7),
            feature_dim: rng.gen_range(2..5),
            margin_hidden: rng.gen_range(2..6),
            classes,
        };
        let model = PmlModel::new_dense(&shape, &mut rng).unwrap();
        let batch = rng.gen_range(1..5);
        let inputs = (0..batch)
            .map(|_| (0..shape.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let targets = (0..batch)
            .map(|_| LabelDistribution::encode(rng.gen_range(0..classes), rng.gen_range(0.7..2.5), classes).unwrap())
            .collect();
        let width = shape.stats_width();
        let values: Vec<f64> = (0..classes * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let snapshot = StatsSnapshot::from_matrix(
            Matrix::from_vec(classes, width, values).unwrap(),
            shape.feature_dim,
            SnapshotTag::default(),
        )
        .unwrap();
        let delta_values: Vec<f64> = (0..classes * width).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let delta = Matrix::from_vec(classes, width, delta_values).unwrap();
        GraphInstance {
            model,
            inputs,
            targets,
            snapshot,
            delta,
            margins: MarginConfig {
                m_max: rng.gen_range(0.5..1.5),
                mu_range: rng.gen_range(1.0..3.0),
                sigma_min: rng.gen_range(0.3..1.0),
            },
            mix: MarginMix {
                lambda: rng.gen_range(0.2..2.0),
                beta: rng.gen_range(0.2..2.0),
            },
        }
    }

    pub fn loss_at(&self, model: &PmlModel) -> f64 {
        let inputs: Vec<&[f64]> = self.inputs.iter().map(Vec::as_slice).collect();
        batch_objective(
            model,
            &inputs,
            &self.targets,
            &self.snapshot,
            &self.delta,
            &self.margins,
            self.mix,
            Objective::Margined,
        )
        .unwrap()
        .loss
    }

    pub fn analytic(&self) -> Vec<f64> {
        let inputs: Vec<&[f64]> = self.inputs.iter().map(Vec::as_slice).collect();
        batch_objective(
            &self.model,
            &inputs,
            &self.targets,
            &self.snapshot,
            &self.delta,
            &self.margins,
            self.mix,
            Objective::Margined,
        )
        .unwrap()
        .grads
        .flatten()
    }

    /// Smallest distance between an unclamped variational output and the
    /// clamp bound; finite differences are unreliable close to it.
    pub fn clamp_clearance(&self) -> f64 {
        self.delta
            .iter_rows()
            .map(|row| {
                let raw = self.model.variational.forward(row).unwrap()[0];
                (raw.abs() - self.margins.m_max).abs()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Central differences over every parameter.
pub fn numeric_gradient(instance: &GraphInstance, step: f64) -> Vec<f64> {
    let base = instance.model.params();
    let mut probe = instance.model.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut shifted = base.clone();
    for i in 0..base.len() {
        shifted[i] = base[i] + step;
        probe.set_params(&shifted).unwrap();
        let up = instance.loss_at(&probe);
        shifted[i] = base[i] - step;
        probe.set_params(&shifted).unwrap();
        let down = instance.loss_at(&probe);
        shifted[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}
