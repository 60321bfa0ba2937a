//! The training loop: per-batch feature extraction, streaming statistics,
//! margins, loss, and one optimizer step, run stage by stage over the
//! curriculum.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::curriculum::{build_plan, CurriculumPlan, Instructor, StageDecision};
use crate::dataset::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::label::{kl_loss, softmax, Decoder, LabelDistribution};
use crate::loss::{pml_loss, predict_margined};
use crate::margin::{
    combine, ordinal_forward, variational_forward, write_margin_csv, MarginConfig, MarginMix, OrdinalMargins,
    VariationalMargin,
};
use crate::matrix::Matrix;
use crate::metrics::{summarize, EvalReport};
use crate::model::{ModelGrads, ModelShape, PmlModel, SavedModel};
use crate::nn::{Optimizer, Trace};
use crate::stats::{ClassStatsBank, StatsSnapshot};

/// Which loss the batch objective evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Margined one-vs-all loss with learned margins.
    Margined,
    /// Softmax cross-entropy with no margin networks involved at all.
    Plain,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Gradients of the mean loss.
    pub grads: ModelGrads,
    /// Per-sample loss gradient with respect to that sample's logits.
    pub d_logits: Vec<Vec<f64>>,
    pub margins: Option<(OrdinalMargins, VariationalMargin)>,
}

/// Mean batch loss and gradients, given features already extracted by the
/// backbone (with their traces) and statistics treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn objective_from_features(
    model: &PmlModel,
    features: &[Vec<f64>],
    traces: &[Trace],
    targets: &[LabelDistribution],
    snapshot: &StatsSnapshot,
    delta: &Matrix,
    margin_config: &MarginConfig,
    mix: MarginMix,
    objective: Objective,
) -> Result<BatchOutcome> {
    let n = features.len();
    if n == 0 || traces.len() != n || targets.len() != n {
        return Err(Error::Validation(format!(
            "batch of {n} features with {} traces and {} targets",
            traces.len(),
            targets.len()
        )));
    }
    let c = model.classes();
    let mut grads = model.zero_grads();
    let mut total = 0.0;
    let mut d_logits_all = Vec::with_capacity(n);

    let margins = match objective {
        Objective::Margined => Some((
            ordinal_forward(&model.ordinal, snapshot, margin_config)?,
            variational_forward(&model.variational, delta, margin_config)?,
        )),
        Objective::Plain => None,
    };
    let mut d_table = Matrix::zeros(c, c);
    let mut d_variational = vec![0.0; c];

    for ((x, trace), target) in features.iter().zip(traces).zip(targets) {
        let logits = model.head.logits(x)?;
        let d_logits = match &margins {
            Some((ordinal, variational)) => {
                let m = combine(ordinal, variational, mix, target.age());
                let pred = predict_margined(&logits, &m)?;
                let sample = pml_loss(target, &pred)?;
                total += sample.loss;
                let row = d_table.row_mut(target.age());
                for (k, g) in sample.d_margins.iter().enumerate() {
                    row[k] += mix.lambda * g;
                    d_variational[k] += mix.beta * g;
                }
                sample.d_logits
            }
            None => {
                let sample = kl_loss(target, &softmax(&logits))?;
                total += sample.loss;
                sample.d_logits
            }
        };
        let dx = model.head.backward(x, &d_logits, &mut grads.head)?;
        model.backbone.backward(trace, &dx, &mut grads.backbone)?;
        d_logits_all.push(d_logits);
    }

    if let Some((ordinal, variational)) = &margins {
        ordinal.backward(&model.ordinal, &d_table, &mut grads.ordinal)?;
        variational.backward(&model.variational, &d_variational, &mut grads.variational)?;
    }

    let scale = 1.0 / n as f64;
    grads.scale(scale);
    Ok(BatchOutcome {
        loss: total * scale,
        grads,
        d_logits: d_logits_all,
        margins,
    })
}

/// Runs the backbone over `inputs` and evaluates the batch objective.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    model: &PmlModel,
    inputs: &[&[f64]],
    targets: &[LabelDistribution],
    snapshot: &StatsSnapshot,
    delta: &Matrix,
    margin_config: &MarginConfig,
    mix: MarginMix,
    objective: Objective,
) -> Result<BatchOutcome> {
    let mut features = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (f, t) = model.backbone.forward_traced(x)?;
        features.push(f);
        traces.push(t);
    }
    objective_from_features(model, &features, &traces, targets, snapshot, delta, margin_config, mix, objective)
}

/// Decoded predictions for every sample of `data`.
pub fn predict_ages(model: &PmlModel, data: &Dataset, decoder: Decoder) -> Result<Vec<f64>> {
    data.samples()
        .iter()
        .map(|s| decoder.decode(&model.predict(&s.features)?))
        .collect()
}

/// Margin-free evaluation; reads the model only.
pub fn evaluate(model: &PmlModel, data: &Dataset, decoder: Decoder, train_counts: &[usize]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let predicted = predict_ages(model, data, decoder)?;
    let truth: Vec<usize> = data.samples().iter().map(|s| s.age).collect();
    let sigma: Vec<f64> = data.samples().iter().map(|s| s.sigma).collect();
    summarize(&predicted, &truth, &sigma, train_counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// One-based stage number.
    pub stage: usize,
    /// One-based epoch within the stage.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val: EvalReport,
    pub imbalance_ratio: f64,
    pub zero_norm_events: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PmlModel,
    pub reports: Vec<EpochReport>,
    pub step_losses: Vec<f64>,
    pub test: EvalReport,
    pub stage_transitions: usize,
    pub instructor_freezes: usize,
    pub bank: ClassStatsBank,
    pub margins: Option<(OrdinalMargins, VariationalMargin)>,
    pub plan: CurriculumPlan,
    pub train_counts: Vec<usize>,
}

impl TrainOutcome {
    pub fn epochs(&self) -> usize {
        self.reports.len()
    }
}

fn resolve_classes(config: &TrainConfig, splits: &Splits) -> Result<usize> {
    let c = if config.classes > 0 {
        config.classes
    } else {
        splits.classes()
    };
    if c < 2 {
        return Err(Error::data("need at least 2 classes"));
    }
    Ok(c)
}

pub fn train(config: &TrainConfig, splits: &Splits) -> Result<TrainOutcome> {
    train_with(config, splits, Objective::Margined)
}

pub fn train_with(config: &TrainConfig, splits: &Splits, objective: Objective) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = resolve_classes(config, splits)?;
    let train_set = splits.train.clone().with_classes(classes)?;
    let val_set = splits.val.clone().with_classes(classes)?;
    let test_set = splits.test.clone().with_classes(classes)?;
    if train_set.is_empty() || val_set.is_empty() || test_set.is_empty() {
        return Err(Error::data("train, validation and test splits must all be non-empty"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = ModelShape {
        input_dim: train_set.dim(),
        hidden_width: config.hidden_width,
        feature_dim: config.feature_dim,
        margin_hidden: config.margin_hidden,
        classes,
    };
    let mut model = PmlModel::new(&shape, &mut rng)?;
    let mut optimizer = Optimizer::new(config.optimizer_config())?;
    let margin_config = config.margin_config();
    let mix = config.mix();
    let schedule = config.schedule();

    let train_counts = train_set.class_counts();
    let members = train_set.class_members();
    let plan = build_plan(&train_counts, &config.stage_fractions(), config.seed)?;
    let targets: Vec<LabelDistribution> = train_set
        .samples()
        .iter()
        .map(|s| LabelDistribution::encode(s.age, config.label_sigma, classes))
        .collect::<Result<_>>()?;

    let mut bank = ClassStatsBank::new(classes, config.feature_dim);
    let mut instructor = Instructor::new();
    let mut reports = Vec::new();
    let mut step_losses = Vec::new();
    let mut transitions = 0;
    let mut freezes = 0;
    let mut last_margins = None;

    'stages: for stage in 0..plan.stage_count() {
        let active = plan.materialize(stage, &members)?;
        let active_set = train_set.subset(&active);
        let ratio = plan.imbalance_ratio(stage);
        let mut history = Vec::new();
        loop {
            if config.restat_each_epoch {
                bank.clear();
            }
            let mut order = active.clone();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(config.batch_size) {
                let previous = bank.snapshot(stage);
                let mut features = Vec::with_capacity(batch.len());
                let mut traces = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (f, t) = model.backbone.forward_traced(&train_set.get(i).features)?;
                    features.push(f);
                    traces.push(t);
                }
                for (&i, f) in batch.iter().zip(&features) {
                    bank.observe(train_set.get(i).age, f).map_err(|e| {
                        Error::NonFinite(format!("feature extraction failed on sample {i}: {e}"))
                    })?;
                }
                let current = bank.snapshot(stage);
                let delta = instructor.stage_reference(&current, &previous)?;
                let batch_targets: Vec<LabelDistribution> = batch.iter().map(|&i| targets[i].clone()).collect();
                let outcome = objective_from_features(
                    &model,
                    &features,
                    &traces,
                    &batch_targets,
                    &current,
                    &delta,
                    &margin_config,
                    mix,
                    objective,
                )?;
                if !outcome.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at stage {}, step {}; batch samples {:?}",
                        outcome.loss,
                        stage + 1,
                        step_losses.len(),
                        batch
                    )));
                }
                step_losses.push(outcome.loss);
                loss_sum += outcome.loss * batch.len() as f64;
                let grads = outcome.grads.slices();
                optimizer.step(&mut model.param_slices_mut(), &grads)?;
                if model.params().iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "parameters diverged after stage {}, step {} (loss {}); batch samples {:?}",
                        stage + 1,
                        step_losses.len(),
                        outcome.loss,
                        batch
                    )));
                }
                if outcome.margins.is_some() {
                    last_margins = outcome.margins;
                }
            }

            let val = evaluate(&model, &val_set, config.decoder, &train_counts)?;
            let train_mae = evaluate(&model, &active_set, config.decoder, &train_counts)?.mae;
            history.push(val.mae);
            reports.push(EpochReport {
                stage: stage + 1,
                epoch: history.len(),
                train_loss: loss_sum / active.len() as f64,
                train_mae,
                val,
                imbalance_ratio: ratio,
                zero_norm_events: bank.take_zero_norm_events(),
            });

            match schedule.decide(stage, plan.stage_count(), &history) {
                StageDecision::Continue => {}
                StageDecision::Advance => {
                    transitions += 1;
                    freezes += 1;
                    instructor.freeze(bank.snapshot(stage));
                    continue 'stages;
                }
                StageDecision::Finish => {
                    transitions += 1;
                    break 'stages;
                }
            }
        }
    }

    let test = evaluate(&model, &test_set, config.decoder, &train_counts)?;
    Ok(TrainOutcome {
        model,
        reports,
        step_losses,
        test,
        stage_transitions: transitions,
        instructor_freezes: freezes,
        bank,
        margins: last_margins,
        plan,
        train_counts,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `stage,epoch,train_loss,train_mae,val_mae,val_epsilon,head_mae,tail_mae,imbalance_ratio,zero_norm_events,mae_class_0..`
pub fn write_metrics_csv<W: Write>(out: &mut W, reports: &[EpochReport], classes: usize) -> std::io::Result<()> {
    let mut header: Vec<String> = [
        "stage",
        "epoch",
        "train_loss",
        "train_mae",
        "val_mae",
        "val_epsilon",
        "head_mae",
        "tail_mae",
        "imbalance_ratio",
        "zero_norm_events",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..classes).map(|j| format!("mae_class_{j}")));
    writeln!(out, "{}", header.join(","))?;
    for r in reports {
        let mut fields = vec![
            r.stage.to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_mae.to_string(),
            r.val.mae.to_string(),
            r.val.epsilon_error.to_string(),
            opt(r.val.head_mae),
            opt(r.val.tail_mae),
            r.imbalance_ratio.to_string(),
            r.zero_norm_events.to_string(),
        ];
        fields.extend(r.val.per_class_mae.iter().map(|v| opt(*v)));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// `index,age,predicted,p_0..` for the first `limit` samples of `data`.
pub fn write_distributions_csv<W: Write>(
    out: &mut W,
    model: &PmlModel,
    data: &Dataset,
    decoder: Decoder,
    limit: usize,
) -> Result<()> {
    let io = |e| Error::io("distributions.csv", e);
    let mut header = vec!["index".to_string(), "age".into(), "predicted".into()];
    header.extend((0..model.classes()).map(|k| format!("p_{k}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, s) in data.samples().iter().take(limit).enumerate() {
        let probs = model.predict(&s.features)?;
        let mut fields = vec![i.to_string(), s.age.to_string(), decoder.decode(&probs)?.to_string()];
        fields.extend(probs.iter().map(f64::to_string));
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    Ok(())
}

/// `split,samples,mae,epsilon,head_mae,tail_mae`.
pub fn write_summary_csv<W: Write>(out: &mut W, rows: &[(&str, &EvalReport)]) -> std::io::Result<()> {
    writeln!(out, "split,samples,mae,epsilon,head_mae,tail_mae")?;
    for (name, r) in rows {
        writeln!(
            out,
            "{name},{},{},{},{},{}",
            r.samples,
            r.mae,
            r.epsilon_error,
            opt(r.head_mae),
            opt(r.tail_mae)
        )?;
    }
    Ok(())
}

/// Creates `dir` and checks that it accepts files, before any training.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-check");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn create(dir: &Path, name: &str) -> Result<(BufWriter<File>, PathBuf)> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((BufWriter::new(file), path))
}

fn finish(w: std::io::Result<()>, mut writer: BufWriter<File>, path: &Path) -> Result<()> {
    w.and_then(|_| writer.flush()).map_err(|e| Error::io(path, e))
}

/// Writes metrics, margins, statistics, distributions, curriculum, summary,
/// config and model files into `dir`.
pub fn dump_artifacts(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome, splits: &Splits) -> Result<()> {
    if outcome.reports.is_empty() {
        return Err(Error::State("no completed epoch to report".into()));
    }
    prepare_out_dir(dir)?;
    let classes = outcome.model.classes();

    let (mut w, path) = create(dir, "metrics.csv")?;
    let r = write_metrics_csv(&mut w, &outcome.reports, classes);
    finish(r, w, &path)?;

    if let Some((ordinal, variational)) = &outcome.margins {
        let (mut w, path) = create(dir, "margins.csv")?;
        let r = write_margin_csv(&mut w, ordinal, variational, config.mix());
        finish(r, w, &path)?;
    }

    let (mut w, path) = create(dir, "stats.csv")?;
    let r = outcome.bank.write_csv(&mut w);
    finish(r, w, &path)?;

    let (mut w, path) = create(dir, "distributions.csv")?;
    let test = splits.test.clone().with_classes(classes)?;
    write_distributions_csv(&mut w, &outcome.model, &test, config.decoder, config.dump_distributions)?;
    finish(Ok(()), w, &path)?;

    let (mut w, path) = create(dir, "curriculum.csv")?;
    let r = outcome.plan.write_csv(&mut w);
    finish(r, w, &path)?;

    let last_val = &outcome.reports[outcome.reports.len() - 1].val;
    let (mut w, path) = create(dir, "summary.csv")?;
    let r = write_summary_csv(&mut w, &[("val", last_val), ("test", &outcome.test)]);
    finish(r, w, &path)?;

    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;

    SavedModel {
        model: outcome.model.clone(),
        decoder: config.decoder,
        train_counts: outcome.train_counts.clone(),
        config: config.to_text(),
    }
    .save(&dir.join("model.json"))
}

/// Loads a split directory (`train.csv`, `val.csv`, `test.csv`) or splits a
/// single CSV file with the given seed.
pub fn load_splits(path: &Path, classes: Option<usize>, seed: u64) -> Result<Splits> {
    if path.is_dir() {
        Splits::load_dir(path, classes)
    } else {
        let data = Dataset::load_csv(path, classes)?;
        Ok(Splits::stratified(&data, seed))
    }
}
