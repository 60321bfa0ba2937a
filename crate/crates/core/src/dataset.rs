//! Synthetic long-tailed ordinal data and the `age,sigma,f_0..` CSV format.
//!
//! Class centers sit on a circular arc (at most half a turn) in a random
//! 2-plane of feature space, lifted off the origin along a third direction,
//! so neighbouring ages have neighbouring centers. Class sizes follow
//! `ceil(n_max * r^-gamma)` for rank `r = 1..c`, with rank 1 placed on the
//! head class and ranks growing with distance from it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

// Absorbs floating error in n_max * r^-gamma before `ceil`.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub age: usize,
    /// Annotated standard deviation of the age label.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: usize,
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(classes: usize, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::data(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.age >= classes {
                return Err(Error::data(format!(
                    "sample {i} has age {} outside [0, {}]",
                    s.age,
                    classes.saturating_sub(1)
                )));
            }
            if !(s.sigma > 0.0 && s.sigma.is_finite()) || s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("sample {i} has non-finite or invalid values")));
            }
        }
        Ok(Dataset { classes, dim, samples })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.age] += 1;
        }
        counts
    }

    /// Sample indices of each class, ascending.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.classes];
        for (i, s) in self.samples.iter().enumerate() {
            members[s.age].push(i);
        }
        members
    }

    /// Same samples, declared over `classes` classes.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(s) = self.samples.iter().find(|s| s.age >= classes) {
            return Err(Error::data(format!("age {} outside [0, {}]", s.age, classes.saturating_sub(1))));
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes,
            dim: self.dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut header = vec!["age".to_string(), "sigma".to_string()];
        header.extend((0..self.dim).map(|d| format!("f_{d}")));
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let mut fields = vec![s.age.to_string(), s.sigma.to_string()];
            fields.extend(s.features.iter().map(f64::to_string));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV format; the class count is `max age + 1` unless
    /// `classes` overrides it.
    pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        Dataset::read_csv(file, classes)
    }

    pub fn read_csv<R: std::io::Read>(input: R, classes: Option<usize>) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::None)
            .from_reader(input);
        let header = reader
            .headers()
            .map_err(|e| Error::data_at(1, format!("unreadable header: {e}")))?
            .clone();
        if header.len() < 3 || &header[0] != "age" || &header[1] != "sigma" {
            return Err(Error::data_at(1, "header must start with age,sigma,f_0"));
        }
        let dim = header.len() - 2;
        for (d, name) in header.iter().skip(2).enumerate() {
            if name != format!("f_{d}") {
                return Err(Error::data_at(1, format!("expected column f_{d}, found {name:?}")));
            }
        }

        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                Error::data_at(line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() != dim + 2 {
                return Err(Error::data_at(
                    line,
                    format!("expected {} fields (header declares {dim} features), found {}", dim + 2, record.len()),
                ));
            }
            let age: usize = record[0]
                .parse()
                .map_err(|_| Error::data_at(line, format!("age {:?} is not a non-negative integer", &record[0])))?;
            let sigma: f64 = parse_real(&record[1], line, "sigma")?;
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(Error::data_at(line, format!("sigma must be positive, got {sigma}")));
            }
            let features = record
                .iter()
                .skip(2)
                .map(|f| parse_real(f, line, "feature"))
                .collect::<Result<Vec<f64>>>()?;
            if let Some(limit) = classes {
                if age >= limit {
                    return Err(Error::data_at(line, format!("age {age} outside [0, {}]", limit - 1)));
                }
            }
            samples.push(Sample { features, age, sigma });
        }
        if samples.is_empty() {
            return Err(Error::data("dataset has a header but no rows"));
        }
        let classes = classes.unwrap_or_else(|| samples.iter().map(|s| s.age).max().unwrap_or(0) + 1);
        Dataset::new(classes, dim, samples)
    }
}

fn parse_real(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::data_at(line, format!("{what} {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data_at(line, format!("{what} {field:?} is not finite")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn classes(&self) -> usize {
        self.train.classes
    }

    /// Per-class 70/15/15 split. Classes with at least three samples put at
    /// least one in each split; a class of two goes to train and test; a
    /// single sample goes to train.
    pub fn stratified(data: &Dataset, seed: u64) -> Splits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for mut members in data.class_members() {
            members.shuffle(&mut rng);
            let (n_val, n_test) = split_sizes(members.len());
            val.extend_from_slice(&members[..n_val]);
            test.extend_from_slice(&members[n_val..n_val + n_test]);
            train.extend_from_slice(&members[n_val + n_test..]);
        }
        for part in [&mut train, &mut val, &mut test] {
            part.sort_unstable();
        }
        Splits {
            train: data.subset(&train),
            val: data.subset(&val),
            test: data.subset(&test),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save_csv(&dir.join("train.csv"))?;
        self.val.save_csv(&dir.join("val.csv"))?;
        self.test.save_csv(&dir.join("test.csv"))
    }

    /// Reads `train.csv`, `val.csv`, `test.csv` with a shared class count.
    pub fn load_dir(dir: &Path, classes: Option<usize>) -> Result<Splits> {
        let train = Dataset::load_csv(&dir.join("train.csv"), classes)?;
        let val = Dataset::load_csv(&dir.join("val.csv"), classes)?;
        let test = Dataset::load_csv(&dir.join("test.csv"), classes)?;
        if train.dim != val.dim || train.dim != test.dim {
            return Err(Error::data("train/val/test feature widths differ"));
        }
        let c = classes.unwrap_or_else(|| train.classes.max(val.classes).max(test.classes));
        Ok(Splits {
            train: train.with_classes(c)?,
            val: val.with_classes(c)?,
            test: test.with_classes(c)?,
        })
    }
}

fn split_sizes(n: usize) -> (usize, usize) {
    match n {
        0 | 1 => (0, 0),
        2 => (0, 1),
        _ => {
            let k = ((0.15 * n as f64).round() as usize).max(1);
            (k, k)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_max: usize,
    pub tail_exponent: f64,
    /// Distance between adjacent class centers.
    pub class_spacing: f64,
    /// Total angle of the center arc, in radians; at most pi.
    pub arc: f64,
    /// Distance of the arc's plane from the origin.
    pub offset: f64,
    pub noise_sigma: f64,
    pub annotated_sigma: f64,
    /// Class that receives rank 1; defaults to the middle class.
    pub head_class: Option<usize>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 20,
            dim: 8,
            n_max: 200,
            tail_exponent: 1.5,
            class_spacing: 1.0,
            arc: 0.75 * std::f64::consts::PI,
            offset: 3.0,
            noise_sigma: 1.0,
            annotated_sigma: 3.0,
            head_class: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 || self.dim < 2 || self.n_max < 10 {
            return Err(Error::Config(format!(
                "need classes >= 3, dim >= 2, n_max >= 10 (got {}, {}, {})",
                self.classes, self.dim, self.n_max
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(self.tail_exponent.is_finite() && self.tail_exponent >= 0.0) {
            return Err(Error::Config("tail exponent must be non-negative".into()));
        }
        if !positive(self.class_spacing) || !positive(self.noise_sigma) || !positive(self.annotated_sigma) {
            return Err(Error::Config("spacing, noise and annotated sigma must be positive".into()));
        }
        if !(positive(self.arc) && self.arc <= std::f64::consts::PI) {
            return Err(Error::Config(format!("arc must lie in (0, pi], got {}", self.arc)));
        }
        if !(self.offset.is_finite() && self.offset >= 0.0) {
            return Err(Error::Config("offset must be non-negative".into()));
        }
        if self.head_class.is_some_and(|h| h >= self.classes) {
            return Err(Error::Config("head class outside the class range".into()));
        }
        Ok(())
    }

    pub fn head(&self) -> usize {
        self.head_class.unwrap_or((self.classes - 1) / 2)
    }

    /// Class counts indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let by_rank = power_law_counts(self.n_max, self.tail_exponent, self.classes);
        let mut counts = vec![0; self.classes];
        for (rank, class) in rank_order(self.classes, self.head()).into_iter().enumerate() {
            counts[class] = by_rank[rank];
        }
        counts
    }
}

/// `ceil(n_max * r^-gamma)` for `r = 1..=classes`.
pub fn power_law_counts(n_max: usize, gamma: f64, classes: usize) -> Vec<usize> {
    (1..=classes)
        .map(|r| (n_max as f64 * (r as f64).powf(-gamma) - CEIL_SLACK).ceil() as usize)
        .collect()
}

/// Classes in rank order: the head first, then by distance from it, lower
/// index first on ties.
pub fn rank_order(classes: usize, head: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by_key(|&j| (j.abs_diff(head), j));
    order
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub splits: Splits,
    pub all: Dataset,
    pub class_counts: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

fn orthonormal_frame<R: rand::Rng>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &frame {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            frame.push(v);
        }
    }
    frame
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Checks that every class's adjacent centers are strictly closer than any
/// non-adjacent one.
pub fn check_ordinal_geometry(centers: &[Vec<f64>]) -> Result<()> {
    let c = centers.len();
    for j in 0..c {
        let adjacent = [j.checked_sub(1), (j + 1 < c).then_some(j + 1)];
        let far_adjacent = adjacent
            .iter()
            .flatten()
            .map(|&k| distance(&centers[j], &centers[k]))
            .fold(0.0, f64::max);
        for k in 0..c {
            if k.abs_diff(j) >= 2 && distance(&centers[j], &centers[k]) <= far_adjacent {
                return Err(Error::Config(format!(
                    "class {k} center is as close to class {j} as its neighbours"
                )));
            }
        }
    }
    Ok(())
}

pub fn generate(spec: &DatasetSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.classes;

    let frame = orthonormal_frame(spec.dim, spec.dim.min(3), &mut rng);
    let step = spec.arc / (c - 1) as f64;
    let radius = spec.class_spacing / (2.0 * (step / 2.0).sin());
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let theta = step * j as f64 - spec.arc / 2.0;
            (0..spec.dim)
                .map(|d| {
                    let mut v = radius * (theta.cos() * frame[0][d] + theta.sin() * frame[1][d]);
                    if let Some(lift) = frame.get(2) {
                        v += spec.offset * lift[d];
                    }
                    v
                })
                .collect()
        })
        .collect();
    check_ordinal_geometry(&centers)?;

    let counts = spec.class_counts();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (j, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let features = centers[j].iter().map(|m| m + noise.sample(&mut rng)).collect();
            samples.push(Sample {
                features,
                age: j,
                sigma: spec.annotated_sigma,
            });
        }
    }
    let all = Dataset::new(c, spec.dim, samples)?;
    if all.is_empty() {
        return Err(Error::Config("specification yields no samples".into()));
    }
    let splits = Splits::stratified(&all, spec.seed.wrapping_add(1));
    Ok(Generated {
        splits,
        all,
        class_counts: counts,
        centers,
    })
}
