//! Training configuration and its flat `key = value` text form.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! [`TrainConfig::to_text`] writes every key in a fixed order, and parsing
//! that text gives back the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::curriculum::{validate_fractions, StageSchedule, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::label::Decoder;
use crate::margin::{MarginConfig, MarginMix};
use crate::nn::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Learned margins plus the balanced-to-imbalanced curriculum.
    Pml,
    /// Plain soft-label cross-entropy on the full training set: margins
    /// weighted by zero and a single curriculum stage.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub label_sigma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub m_max: f64,
    pub mu_range: f64,
    pub sigma_min: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_per_stage: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub curriculum: Vec<f64>,
    pub seed: u64,
    pub decoder: Decoder,
    pub hidden_width: usize,
    pub feature_dim: usize,
    pub margin_hidden: usize,
    /// Rebuild class statistics from scratch at every epoch boundary.
    pub restat_each_epoch: bool,
    /// Class count override; 0 infers it from the data.
    pub classes: usize,
    /// Number of test samples whose predicted distributions are dumped.
    pub dump_distributions: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Pml,
            label_sigma: 2.0,
            lambda: 1.0,
            beta: 1.0,
            m_max: 0.5,
            mu_range: 2.0,
            sigma_min: 0.5,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 32,
            epochs_per_stage: 30,
            patience: 5,
            min_improvement: 1e-3,
            curriculum: DEFAULT_FRACTIONS.to_vec(),
            seed: 0,
            decoder: Decoder::Expectation,
            hidden_width: 32,
            feature_dim: 8,
            margin_hidden: 16,
            restat_each_epoch: false,
            classes: 0,
            dump_distributions: 12,
            data: None,
            out: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join_list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value {
                    "pml" => Mode::Pml,
                    "baseline" => Mode::Baseline,
                    _ => return Err(Error::Config(format!("mode must be pml or baseline, got {value:?}"))),
                }
            }
            "sigma" => self.label_sigma = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "m_max" => self.m_max = parse_value(key, value)?,
            "mu_range" => self.mu_range = parse_value(key, value)?,
            "sigma_min" => self.sigma_min = parse_value(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("optimizer must be adam or sgd, got {value:?}"))),
                }
            }
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs_per_stage" => self.epochs_per_stage = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "min_improvement" => self.min_improvement = parse_value(key, value)?,
            "curriculum" => self.curriculum = parse_list(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "decoder" => {
                self.decoder = match value {
                    "expectation" => Decoder::Expectation,
                    "argmax" => Decoder::Argmax,
                    _ => return Err(Error::Config(format!("decoder must be expectation or argmax, got {value:?}"))),
                }
            }
            "hidden_width" => self.hidden_width = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "margin_hidden" => self.margin_hidden = parse_value(key, value)?,
            "restat_each_epoch" => self.restat_each_epoch = parse_value(key, value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "dump_distributions" => self.dump_distributions = parse_value(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put(
            "mode",
            match self.mode {
                Mode::Pml => "pml",
                Mode::Baseline => "baseline",
            }
            .into(),
        );
        put("sigma", self.label_sigma.to_string());
        put("lambda", self.lambda.to_string());
        put("beta", self.beta.to_string());
        put("m_max", self.m_max.to_string());
        put("mu_range", self.mu_range.to_string());
        put("sigma_min", self.sigma_min.to_string());
        put(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        put("learning_rate", self.learning_rate.to_string());
        put("momentum", self.momentum.to_string());
        put("beta2", self.beta2.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs_per_stage", self.epochs_per_stage.to_string());
        put("patience", self.patience.to_string());
        put("min_improvement", self.min_improvement.to_string());
        put("curriculum", join_list(&self.curriculum));
        put("seed", self.seed.to_string());
        put(
            "decoder",
            match self.decoder {
                Decoder::Expectation => "expectation",
                Decoder::Argmax => "argmax",
            }
            .into(),
        );
        put("hidden_width", self.hidden_width.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("margin_hidden", self.margin_hidden.to_string());
        put("restat_each_epoch", self.restat_each_epoch.to_string());
        put("classes", self.classes.to_string());
        put("dump_distributions", self.dump_distributions.to_string());
        put("data", path(&self.data));
        put("out", path(&self.out));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_sigma.is_finite() && self.label_sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.label_sigma)));
        }
        self.mix().validate()?;
        self.margin_config().validate()?;
        self.optimizer_config().validate()?;
        validate_fractions(&self.curriculum)?;
        if self.batch_size == 0 || self.epochs_per_stage == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, epochs_per_stage and patience must be positive".into()));
        }
        if !(self.min_improvement.is_finite() && self.min_improvement >= 0.0) {
            return Err(Error::Config("min_improvement must be non-negative".into()));
        }
        if self.hidden_width == 0 || self.feature_dim == 0 || self.margin_hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.classes == 1 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Margin weights actually used: zero in baseline mode.
    pub fn mix(&self) -> MarginMix {
        match self.mode {
            Mode::Pml => MarginMix {
                lambda: self.lambda,
                beta: self.beta,
            },
            Mode::Baseline => MarginMix::NONE,
        }
    }

    /// Curriculum actually used: a single full-data stage in baseline mode.
    pub fn stage_fractions(&self) -> Vec<f64> {
        match self.mode {
            Mode::Pml => self.curriculum.clone(),
            Mode::Baseline => vec![1.0],
        }
    }

    /// Stage schedule; baseline's single stage gets the whole epoch budget
    /// the curriculum would have spread over its stages.
    pub fn schedule(&self) -> StageSchedule {
        let budget = match self.mode {
            Mode::Pml => self.epochs_per_stage,
            Mode::Baseline => self.epochs_per_stage * self.curriculum.len(),
        };
        StageSchedule {
            patience: self.patience,
            epoch_budget: budget,
            min_improvement: self.min_improvement,
        }
    }

    pub fn margin_config(&self) -> MarginConfig {
        MarginConfig {
            m_max: self.m_max,
            mu_range: self.mu_range,
            sigma_min: self.sigma_min,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.momentum,
            beta2: self.beta2,
            epsilon: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}
