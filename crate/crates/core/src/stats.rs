//! Streaming per-class statistics on detached features.
//!
//! Each observed feature updates its class center with the running-mean
//! recursion, adds `d(x, c_before) * d(x, c_after)` to the class's
//! intra-variance accumulator, and refreshes the cosine-distance profile
//! between that center and every other center.

use std::io::Write;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Cosine distance `1 - a.b / (|a||b|)`, or `None` when either vector has
/// zero norm. The cosine is clamped to `[-1, 1]`, so the result is in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is
    // exactly na, so self-distance comes out exactly zero.
    let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
    Some(1.0 - cos)
}

/// Center before and after one running-mean update.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterUpdate {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

/// Which point of training a snapshot was taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SnapshotTag {
    pub iteration: u64,
    pub stage: usize,
}

/// Row-wise concatenation `[center | intra variance | inter-variance row]`
/// for every class: `c x (D + 1 + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSnapshot {
    values: Matrix,
    dim: usize,
    pub tag: SnapshotTag,
}

impl StatsSnapshot {
    /// All-zero snapshot, the reference before any sample has been seen.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        StatsSnapshot {
            values: Matrix::zeros(classes, dim + 1 + classes),
            dim,
            tag: SnapshotTag::default(),
        }
    }

    pub fn from_matrix(values: Matrix, dim: usize, tag: SnapshotTag) -> Result<Self> {
        if values.cols() != dim + 1 + values.rows() {
            return Err(Error::Shape {
                context: "snapshot columns",
                expected: dim + 1 + values.rows(),
                actual: values.cols(),
            });
        }
        Ok(StatsSnapshot { values, dim, tag })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn classes(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.values.row(j)
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.values.row(j)[..self.dim]
    }

    pub fn intra(&self, j: usize) -> f64 {
        self.values.get(j, self.dim)
    }

    pub fn inter_row(&self, j: usize) -> &[f64] {
        &self.values.row(j)[self.dim + 1..]
    }
}

/// `current - reference`, element-wise over the snapshot layout.
pub fn residual(current: &StatsSnapshot, reference: &StatsSnapshot) -> Result<Matrix> {
    if current.dim != reference.dim {
        return Err(Error::Validation(format!(
            "snapshot feature widths differ: {} vs {}",
            current.dim, reference.dim
        )));
    }
    current.values.sub(&reference.values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatsBank {
    classes: usize,
    dim: usize,
    centers: Matrix,
    intra_sum: Vec<f64>,
    inter: Matrix,
    counts: Vec<u64>,
    iteration: u64,
    zero_norm_events: u64,
}

impl ClassStatsBank {
    pub fn new(classes: usize, dim: usize) -> Self {
        ClassStatsBank {
            classes,
            dim,
            centers: Matrix::zeros(classes, dim),
            intra_sum: vec![0.0; classes],
            inter: Matrix::zeros(classes, classes),
            counts: vec![0; classes],
            iteration: 0,
            zero_norm_events: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, j: usize) -> &[f64] {
        self.centers.row(j)
    }

    pub fn count(&self, j: usize) -> u64 {
        self.counts[j]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Raw accumulated sum of distance products.
    pub fn intra_sum(&self, j: usize) -> f64 {
        self.intra_sum[j]
    }

    /// Accumulator divided by `max(N_j, 1)`.
    pub fn intra_variance(&self, j: usize) -> f64 {
        self.intra_sum[j] / self.counts[j].max(1) as f64
    }

    pub fn inter(&self) -> &Matrix {
        &self.inter
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// How often the zero-norm convention fired since the last reset.
    pub fn zero_norm_events(&self) -> u64 {
        self.zero_norm_events
    }

    pub fn take_zero_norm_events(&mut self) -> u64 {
        std::mem::take(&mut self.zero_norm_events)
    }

    /// Forgets every statistic; used when re-estimating from scratch.
    pub fn clear(&mut self) {
        *self = ClassStatsBank::new(self.classes, self.dim);
    }

    fn check(&self, j: usize, x: &[f64]) -> Result<()> {
        if j >= self.classes {
            return Err(Error::Range(format!(
                "class {j} outside [0, {}]",
                self.classes - 1
            )));
        }
        if x.len() != self.dim {
            return Err(Error::Shape {
                context: "stats feature",
                expected: self.dim,
                actual: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature component {v} for class {j}")));
        }
        Ok(())
    }

    fn distance(&mut self, a: &[f64], b: &[f64]) -> f64 {
        cosine_distance(a, b).unwrap_or_else(|| {
            self.zero_norm_events += 1;
            0.0
        })
    }

    /// Running-mean update of class `j`'s center. For a class's first
    /// sample, `before` is the sample itself.
    pub fn update_center(&mut self, j: usize, x: &[f64]) -> Result<CenterUpdate> {
        self.check(j, x)?;
        let n = self.counts[j];
        let before = if n == 0 {
            x.to_vec()
        } else {
            self.centers.row(j).to_vec()
        };
        let denom = (n + 1) as f64;
        let after: Vec<f64> = if n == 0 {
            x.to_vec()
        } else {
            before.iter().zip(x).map(|(c, v)| c + (v - c) / denom).collect()
        };
        self.centers.row_mut(j).copy_from_slice(&after);
        self.counts[j] = n + 1;
        Ok(CenterUpdate { before, after })
    }

    /// Adds `d(x, c_before) * d(x, c_after)` to class `j`'s accumulator.
    pub fn update_intra(&mut self, j: usize, x: &[f64], update: &CenterUpdate) -> Result<()> {
        self.check(j, x)?;
        let d_before = self.distance(x, &update.before);
        let d_after = self.distance(x, &update.after);
        self.intra_sum[j] += d_before * d_after;
        Ok(())
    }

    /// Cosine distances from center `j` to every center, computed fresh.
    pub fn inter_variance(&mut self, j: usize) -> Vec<f64> {
        let cj = self.centers.row(j).to_vec();
        (0..self.classes)
            .map(|k| {
                if k == j {
                    0.0
                } else {
                    let ck = self.centers.row(k).to_vec();
                    self.distance(&cj, &ck)
                }
            })
            .collect()
    }

    /// Recomputes row and column `j` of the inter-variance matrix.
    pub fn refresh_inter(&mut self, j: usize) {
        let row = self.inter_variance(j);
        for (k, d) in row.into_iter().enumerate() {
            self.inter.set(j, k, d);
            self.inter.set(k, j, d);
        }
    }

    /// Center, inter-variance, then intra-variance update for one sample.
    pub fn observe(&mut self, j: usize, x: &[f64]) -> Result<()> {
        let update = self.update_center(j, x)?;
        self.refresh_inter(j);
        self.update_intra(j, x, &update)?;
        self.iteration += 1;
        Ok(())
    }

    pub fn snapshot(&self, stage: usize) -> StatsSnapshot {
        let width = self.dim + 1 + self.classes;
        let mut values = Matrix::zeros(self.classes, width);
        for j in 0..self.classes {
            let row = values.row_mut(j);
            row[..self.dim].copy_from_slice(self.centers.row(j));
            row[self.dim] = self.intra_variance(j);
            row[self.dim + 1..].copy_from_slice(self.inter.row(j));
        }
        StatsSnapshot {
            values,
            dim: self.dim,
            tag: SnapshotTag {
                iteration: self.iteration,
                stage,
            },
        }
    }

    /// One row per class: `class,count,c_0..,phi,psi_0..`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut header = vec!["class".to_string(), "count".to_string()];
        header.extend((0..self.dim).map(|d| format!("c_{d}")));
        header.push("phi".into());
        header.extend((0..self.classes).map(|k| format!("psi_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for j in 0..self.classes {
            let mut fields = vec![j.to_string(), self.counts[j].to_string()];
            fields.extend(self.centers.row(j).iter().map(f64::to_string));
            fields.push(self.intra_variance(j).to_string());
            fields.extend(self.inter.row(j).iter().map(f64::to_string));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}
