//! Balanced-to-imbalanced curricula.
//!
//! Classes are ranked by ascending sample count. At stage `i` the dividing
//! rank is `delta_i = ceil(f_i * n) - 1` over the `n` non-empty classes;
//! classes up to that rank keep every sample and every later class is capped
//! at the count of the class sitting on the dividing rank. Each class draws
//! its subsample as a prefix of one seeded permutation, so every stage's
//! subset contains the previous one.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::{residual, StatsSnapshot};

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

// Absorbs representation error in products like 0.7 * 10 before `ceil`.
const CEIL_SLACK: f64 = 1e-9;

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Config("curriculum needs at least one stage".into()));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Config(format!(
            "curriculum fractions must lie in (0, 1], got {fractions:?}"
        )));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "curriculum fractions must be strictly ascending, got {fractions:?}"
        )));
    }
    if *fractions.last().unwrap() != 1.0 {
        return Err(Error::Config("last curriculum fraction must be 1.0".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    fractions: Vec<f64>,
    counts: Vec<usize>,
    /// Rank among non-empty classes, `None` for empty ones.
    ranks: Vec<Option<usize>>,
    dividing_ranks: Vec<usize>,
    caps: Vec<usize>,
    /// `stages[i][j]`: retained positions within class `j`'s sample list,
    /// ascending.
    stages: Vec<Vec<Vec<usize>>>,
    seed: u64,
}

pub fn build_plan(counts: &[usize], fractions: &[f64], seed: u64) -> Result<CurriculumPlan> {
    validate_fractions(fractions)?;
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::Config("curriculum needs at least one sample".into()));
    }

    let mut order: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0).collect();
    // stable sort keeps class-index order among ties
    order.sort_by_key(|&j| counts[j]);
    let mut ranks = vec![None; counts.len()];
    for (r, &j) in order.iter().enumerate() {
        ranks[j] = Some(r);
    }

    let n = order.len();
    let dividing_ranks: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * n as f64 - CEIL_SLACK).ceil() as usize).clamp(1, n) - 1)
        .collect();
    let caps: Vec<usize> = dividing_ranks.iter().map(|&d| counts[order[d]]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutations: Vec<Vec<usize>> = counts
        .iter()
        .map(|&n| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let stages = caps
        .iter()
        .map(|&cap| {
            permutations
                .iter()
                .map(|perm| {
                    let mut kept = perm[..perm.len().min(cap)].to_vec();
                    kept.sort_unstable();
                    kept
                })
                .collect()
        })
        .collect();

    Ok(CurriculumPlan {
        fractions: fractions.to_vec(),
        counts: counts.to_vec(),
        ranks,
        dividing_ranks,
        caps,
        stages,
        seed,
    })
}

impl CurriculumPlan {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn original_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn rank(&self, class: usize) -> Option<usize> {
        self.ranks[class]
    }

    pub fn dividing_ranks(&self) -> &[usize] {
        &self.dividing_ranks
    }

    pub fn cap(&self, stage: usize) -> usize {
        self.caps[stage]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn retained(&self, stage: usize, class: usize) -> &[usize] {
        &self.stages[stage][class]
    }

    pub fn stage_counts(&self, stage: usize) -> Vec<usize> {
        self.stages[stage].iter().map(Vec::len).collect()
    }

    /// Largest class count over smallest non-zero class count.
    pub fn imbalance_ratio(&self, stage: usize) -> f64 {
        imbalance_ratio(&self.stage_counts(stage))
    }

    /// Maps retained positions onto dataset indices. `members[j]` lists the
    /// dataset indices of class `j` in the order the plan was built over.
    pub fn materialize(&self, stage: usize, members: &[Vec<usize>]) -> Result<Vec<usize>> {
        if members.len() != self.classes() {
            return Err(Error::Shape {
                context: "curriculum class members",
                expected: self.classes(),
                actual: members.len(),
            });
        }
        let mut out = Vec::new();
        for (j, positions) in self.stages[stage].iter().enumerate() {
            if members[j].len() != self.counts[j] {
                return Err(Error::Validation(format!(
                    "class {j} has {} members but the plan expects {}",
                    members[j].len(),
                    self.counts[j]
                )));
            }
            out.extend(positions.iter().map(|&p| members[j][p]));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// `stage,class,rank,retained_count,original_count,imbalance_ratio`,
    /// stages numbered from 1.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "stage,class,rank,retained_count,original_count,imbalance_ratio")?;
        for stage in 0..self.stage_count() {
            let ratio = self.imbalance_ratio(stage);
            for class in 0..self.classes() {
                let rank = self.ranks[class].map(|r| r.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    stage + 1,
                    class,
                    rank,
                    self.stages[stage][class].len(),
                    self.counts[class],
                    ratio
                )?;
            }
        }
        Ok(())
    }
}

pub fn imbalance_ratio(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    match counts.iter().copied().filter(|&n| n > 0).min() {
        Some(min) => max as f64 / min as f64,
        None => 1.0,
    }
}

/// Holds the frozen statistics of the previous, more balanced stage.
#[derive(Debug, Clone, Default)]
pub struct Instructor {
    stage: usize,
    v_pre: Option<StatsSnapshot>,
}

impl Instructor {
    pub fn new() -> Self {
        Instructor::default()
    }

    /// Instructor for a given zero-based stage.
    pub fn at_stage(stage: usize, v_pre: Option<StatsSnapshot>) -> Self {
        Instructor { stage, v_pre }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn v_pre(&self) -> Option<&StatsSnapshot> {
        self.v_pre.as_ref()
    }

    /// Freezes `snapshot` as the reference and moves to the next stage.
    pub fn freeze(&mut self, snapshot: StatsSnapshot) {
        self.v_pre = Some(snapshot);
        self.stage += 1;
    }

    /// Residual fed to the variational margin: against the previous
    /// iteration in the first stage, against the frozen instructor after.
    pub fn stage_reference(&self, current: &StatsSnapshot, previous_iteration: &StatsSnapshot) -> Result<Matrix> {
        if self.stage == 0 {
            return residual(current, previous_iteration);
        }
        match &self.v_pre {
            Some(v_pre) => residual(current, v_pre),
            None => Err(Error::State(format!(
                "stage {} has no frozen instructor snapshot",
                self.stage + 1
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageDecision {
    Continue,
    Advance,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub patience: usize,
    pub epoch_budget: usize,
    pub min_improvement: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            patience: 5,
            epoch_budget: 30,
            min_improvement: 1e-3,
        }
    }
}

impl StageSchedule {
    /// True when the last `patience` epochs failed to beat the best earlier
    /// validation MAE by more than `min_improvement`. When the window spans
    /// the whole history, its first entry is the reference.
    pub fn plateaued(&self, history: &[f64]) -> bool {
        let p = self.patience.max(1);
        if history.len() < p {
            return false;
        }
        let start = history.len() - p;
        let (reference, window) = if start == 0 {
            (history[0], &history[1..])
        } else {
            (
                history[..start].iter().copied().fold(f64::INFINITY, f64::min),
                &history[start..],
            )
        };
        let best_recent = window.iter().copied().fold(f64::INFINITY, f64::min);
        (reference - best_recent).partial_cmp(&self.min_improvement) != Some(std::cmp::Ordering::Greater)
    }

    /// Decision after an epoch of the zero-based `stage`, given that stage's
    /// per-epoch validation MAE.
    pub fn decide(&self, stage: usize, stages: usize, history: &[f64]) -> StageDecision {
        let done = history.len() >= self.epoch_budget || self.plateaued(history);
        match (done, stage + 1 >= stages) {
            (false, _) => StageDecision::Continue,
            (true, false) => StageDecision::Advance,
            (true, true) => StageDecision::Finish,
        }
    }
}
