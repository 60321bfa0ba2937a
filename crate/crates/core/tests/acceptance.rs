//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion outside `KNOWN_GAPS` failed.

mod common;

use std::time::{Duration, Instant};

use common::*;
use pml::config::{Mode, TrainConfig};
use pml::curriculum::build_plan;
use pml::dataset::{generate, DatasetSpec};
use pml::label::{decode_expectation, kl_loss, LabelDistribution};
use pml::loss::{pml_loss, predict_margined};
use pml::margin::{MarginConfig, MarginMix};
use pml::matrix::Matrix;
use pml::metrics::epsilon_error;
use pml::model::{ModelShape, PmlModel};
use pml::stats::{ClassStatsBank, SnapshotTag, StatsSnapshot};
use pml::train::{dump_artifacts, objective_from_features, train_with, Objective};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria whose literal statement cannot hold for a correct
/// implementation; reported but not asserted.
const KNOWN_GAPS: &[&str] = &["4b"];

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn timed(limit: Duration, elapsed: Duration, pass: bool) -> bool {
    pass && elapsed <= limit
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut min_clearance = f64::INFINITY;
    for seed in 0..24 {
        let g = GraphInstance::random(1000 + seed);
        min_clearance = min_clearance.min(g.clamp_clearance());
        let analytic = g.analytic();
        let numeric = numeric_gradient(&g, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, 1e-5));
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: "1",
        name: "gradient oracle",
        pass: timed(Duration::from_secs(30), elapsed, worst <= 1e-4 && min_clearance > 1e-4),
        detail: format!(
            "24 instances, {checked} parameters, worst relative error {worst:.2e}, clamp clearance {min_clearance:.2e}, {elapsed:.2?}"
        ),
    }
}

fn zero_margin_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..100 {
        let classes = rng.gen_range(2..12);
        let shape = ModelShape {
            input_dim: rng.gen_range(2..8),
            hidden_width: rng.gen_range(3..10),
            feature_dim: rng.gen_range(2..6),
            margin_hidden: rng.gen_range(2..6),
            classes,
        };
        let model = PmlModel::new_dense(&shape, &mut rng).unwrap();
        let batch = rng.gen_range(1..16);
        let mut features = Vec::new();
        let mut traces = Vec::new();
        for _ in 0..batch {
            let x: Vec<f64> = (0..shape.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (f, t) = model.backbone.forward_traced(&x).unwrap();
            features.push(f);
            traces.push(t);
        }
        let targets: Vec<LabelDistribution> = (0..batch)
            .map(|_| LabelDistribution::encode(rng.gen_range(0..classes), rng.gen_range(0.5..3.0), classes).unwrap())
            .collect();
        let width = shape.stats_width();
        let snapshot = StatsSnapshot::from_matrix(
            Matrix::from_vec(classes, width, (0..classes * width).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            shape.feature_dim,
            SnapshotTag::default(),
        )
        .unwrap();
        let delta = Matrix::from_vec(classes, width, (0..classes * width).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cfg = MarginConfig::default();
        let run = |objective| {
            objective_from_features(&model, &features, &traces, &targets, &snapshot, &delta, &cfg, MarginMix::NONE, objective)
                .unwrap()
        };
        let margined = run(Objective::Margined);
        let plain = run(Objective::Plain);
        worst_loss = worst_loss.max((margined.loss - plain.loss).abs());
        for (a, b) in margined.d_logits.iter().zip(&plain.d_logits) {
            for (x, y) in a.iter().zip(b) {
                worst_grad = worst_grad.max((x - y).abs());
            }
        }
    }

    // The same check over a whole training run in baseline mode.
    let generated = generate(&DatasetSpec {
        classes: 8,
        n_max: 60,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut config = TrainConfig {
        mode: Mode::Baseline,
        epochs_per_stage: 2,
        ..TrainConfig::default()
    };
    config.curriculum = vec![0.5, 1.0];
    let a = train_with(&config, &generated.splits, Objective::Margined).unwrap();
    let b = train_with(&config, &generated.splits, Objective::Plain).unwrap();
    let mut worst_step = 0.0f64;
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        worst_step = worst_step.max((x - y).abs());
    }
    let same_len = a.step_losses.len() == b.step_losses.len();

    let elapsed = start.elapsed();
    let pass = worst_loss <= 1e-12 && worst_grad <= 1e-12 && worst_step <= 1e-12 && same_len;
    Outcome {
        id: "2",
        name: "zero-margin equivalence",
        pass: timed(Duration::from_secs(5), elapsed, pass),
        detail: format!(
            "100 batches: loss diff {worst_loss:.1e}, logit grad diff {worst_grad:.1e}; {} training steps: diff {worst_step:.1e}; {elapsed:.2?}",
            a.step_losses.len()
        ),
    }
}

fn streaming_statistics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_center = 0.0f64;
    let mut worst_acc = 0.0f64;
    let mut worst_psi = 0.0f64;
    let mut symmetric = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..=1000);
        let classes = rng.gen_range(2..=20);
        let dim = rng.gen_range(1..=16);
        let stream = random_stream(&mut rng, n, classes, dim);
        let mut permuted = stream.clone();
        permuted.shuffle(&mut rng);
        let means = two_pass_means(&stream, classes, dim);
        for order in [&stream, &permuted] {
            let mut bank = ClassStatsBank::new(classes, dim);
            for (j, x) in order.iter() {
                bank.observe(*j, x).unwrap();
            }
            for (j, mean) in means.iter().enumerate() {
                if let Some(mean) = mean {
                    for (a, b) in bank.center(j).iter().zip(mean) {
                        worst_center = worst_center.max((a - b).abs());
                    }
                }
            }
            let replay = replay_accumulator(order, classes, dim);
            for (j, r) in replay.iter().enumerate() {
                worst_acc = worst_acc.max((bank.intra_sum(j) - r).abs());
            }
            let psi = bank.inter();
            for j in 0..classes {
                symmetric &= psi.get(j, j) == 0.0;
                for k in 0..classes {
                    symmetric &= psi.get(j, k) == psi.get(k, j);
                    if k != j {
                        let oracle = cosine_oracle(bank.center(j), bank.center(k));
                        worst_psi = worst_psi.max((psi.get(j, k) - oracle).abs());
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_center <= 1e-9 && worst_acc <= 1e-6 && symmetric && worst_psi <= 1e-9;
    Outcome {
        id: "3",
        name: "streaming statistics",
        pass: timed(Duration::from_secs(30), elapsed, pass),
        detail: format!(
            "200 streams x 2 orders: center diff {worst_center:.1e}, accumulator diff {worst_acc:.1e}, psi symmetric/zero-diagonal {symmetric}, psi vs oracle {worst_psi:.1e}, {elapsed:.2?}"
        ),
    }
}

const SIGMAS: [f64; 8] = [0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 5.0];

fn label_codec() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for c in 2..=101 {
        for &sigma in &SIGMAS {
            for age in 0..c {
                let y = LabelDistribution::encode(age, sigma, c).unwrap();
                worst_sum = worst_sum.max((y.probs().iter().sum::<f64>() - 1.0).abs());
                let decoded = decode_expectation(y.probs()).unwrap();
                worst_oracle = worst_oracle.max((decoded - truncated_gaussian_mean(age, sigma, c)).abs());
            }
        }
    }
    let mut worst_analytic = 0.0f64;
    for c in 2..=101 {
        for k in [0, c / 2, c - 1] {
            let target = LabelDistribution::encode(k, 0.01, c).unwrap();
            let mut one_hot = vec![0.0; c];
            one_hot[k] = 1.0;
            worst_analytic = worst_analytic.max(kl_loss(&target, &one_hot).unwrap().loss.abs());
            let uniform = vec![1.0 / c as f64; c];
            let log_c = (c as f64).ln();
            worst_analytic = worst_analytic.max((kl_loss(&target, &uniform).unwrap().loss - log_c).abs());
            let pred = predict_margined(&vec![0.3; c], &vec![0.0; c]).unwrap();
            worst_analytic = worst_analytic.max((pml_loss(&target, &pred).unwrap().loss - log_c).abs());
        }
    }
    Outcome {
        id: "4a",
        name: "label codec sums and analytic losses",
        pass: worst_sum <= 1e-12 && worst_analytic <= 1e-12 && worst_oracle <= 1e-9,
        detail: format!(
            "sum diff {worst_sum:.1e}; one-hot 0 / uniform log c diff {worst_analytic:.1e}; decode vs truncated-mean oracle {worst_oracle:.1e}"
        ),
    }
}

fn label_decode_interior() -> Outcome {
    let mut worst = (0.0f64, 0.0, 0, 0);
    for c in 2..=101 {
        for &sigma in &SIGMAS {
            for age in 0..c {
                if (age as f64) < 4.0 * sigma || age as f64 + 4.0 * sigma > (c - 1) as f64 {
                    continue;
                }
                let y = LabelDistribution::encode(age, sigma, c).unwrap();
                let err = (decode_expectation(y.probs()).unwrap() - age as f64).abs();
                if err > worst.0 {
                    worst = (err, sigma, c, age);
                }
            }
        }
    }
    let (err, sigma, c, age) = worst;
    Outcome {
        id: "4b",
        name: "decode(encode(a)) = a within 1e-6 for a +- 4 sigma inside the range",
        pass: err <= 1e-6,
        detail: format!(
            "worst {err:.2e} at sigma {sigma}, c {c}, age {age}; the truncated Gaussian's own mean is off by the same amount"
        ),
    }
}

fn curriculum_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    let mut first_bad = String::new();
    for trial in 0..500 {
        let c = rng.gen_range(1..=30);
        let mut counts: Vec<usize> = (0..c)
            .map(|_| if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..=300) })
            .collect();
        if counts.iter().all(|&n| n == 0) {
            counts[0] = 1;
        }
        let den = rng.gen_range(1..=8usize);
        let mut nums: Vec<usize> = (1..den).filter(|_| rng.gen_bool(0.6)).collect();
        nums.push(den);
        let fractions: Vec<f64> = nums.iter().map(|&k| k as f64 / den as f64).collect();
        let plan = build_plan(&counts, &fractions, trial).unwrap();

        let mut order: Vec<usize> = (0..c).filter(|&j| counts[j] > 0).collect();
        order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));
        let n = order.len();
        let mut previous_ratio = 0.0;
        for (s, &num) in nums.iter().enumerate() {
            let delta = (num * n).div_ceil(den) - 1;
            let cap = counts[order[delta]];
            for j in 0..c {
                let kept = plan.retained(s, j);
                let distinct = kept.windows(2).all(|w| w[0] < w[1]) && kept.iter().all(|&p| p < counts[j]);
                let capped = kept.len() == counts[j].min(cap);
                let nested = s == 0 || plan.retained(s - 1, j).iter().all(|p| kept.binary_search(p).is_ok());
                if !(distinct && capped && nested) && ok {
                    ok = false;
                    first_bad = format!("trial {trial} stage {s} class {j}");
                }
            }
            let ratio = plan.imbalance_ratio(s);
            if ratio < previous_ratio && ok {
                ok = false;
                first_bad = format!("trial {trial} ratio drops at stage {s}");
            }
            previous_ratio = ratio;
        }
        let last = nums.len() - 1;
        if plan.stage_counts(last) != counts && ok {
            ok = false;
            first_bad = format!("trial {trial} final stage is not the full set");
        }
    }
    let plan = build_plan(&[10, 20, 40, 80], &[0.25, 0.5, 0.75, 1.0], 0).unwrap();
    let ratios: Vec<f64> = (0..4).map(|s| plan.imbalance_ratio(s)).collect();
    let worked = ratios == [1.0, 2.0, 4.0, 8.0];
    let elapsed = start.elapsed();
    Outcome {
        id: "5",
        name: "curriculum invariants",
        pass: timed(Duration::from_secs(10), elapsed, ok && worked),
        detail: format!("500 count vectors {}; worked example ratios {ratios:?}; {elapsed:.2?}", if ok { "ok".into() } else { first_bad }),
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let mut pml_tail = Vec::new();
    let mut base_tail = Vec::new();
    let mut pml_mae = Vec::new();
    let mut base_mae = Vec::new();
    for seed in 0..5 {
        let generated = generate(&DatasetSpec {
            classes: 20,
            dim: 8,
            tail_exponent: 1.5,
            n_max: 200,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap();
        let pml = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let baseline = TrainConfig {
            mode: Mode::Baseline,
            ..pml.clone()
        };
        let a = train_with(&pml, &generated.splits, Objective::Margined).unwrap();
        let b = train_with(&baseline, &generated.splits, Objective::Plain).unwrap();
        pml_tail.push(a.test.tail_mae.unwrap());
        base_tail.push(b.test.tail_mae.unwrap());
        pml_mae.push(a.test.mae);
        base_mae.push(b.test.mae);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pt, bt, pm, bm) = (mean(&pml_tail), mean(&base_tail), mean(&pml_mae), mean(&base_mae));
    let elapsed = start.elapsed();
    Outcome {
        id: "6",
        name: "end-to-end tail improvement",
        pass: timed(Duration::from_secs(300), elapsed, pt <= bt && pm <= 1.05 * bm),
        detail: format!(
            "tail MAE pml {pt:.4} vs baseline {bt:.4}; overall MAE pml {pm:.4} vs baseline {bm:.4}; {elapsed:.2?}"
        ),
    }
}

fn epsilon_values() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..80.0)).collect();
    let sigma: Vec<f64> = (0..200).map(|_| rng.gen_range(0.5..6.0)).collect();
    let perfect = epsilon_error(&truth, &truth, &sigma).unwrap();
    let off: Vec<f64> = truth
        .iter()
        .zip(&sigma)
        .enumerate()
        .map(|(i, (t, s))| if i % 2 == 0 { t + s } else { t - s })
        .collect();
    let one_sigma = epsilon_error(&off, &truth, &sigma).unwrap();
    let expected = 1.0 - (-0.5f64).exp();
    Outcome {
        id: "7",
        name: "epsilon-error",
        pass: perfect == 0.0 && (one_sigma - expected).abs() <= 1e-9,
        detail: format!("perfect {perfect}; one-sigma {one_sigma:.12} vs {expected:.12}"),
    }
}

fn determinism() -> Outcome {
    let generated = generate(&DatasetSpec {
        seed: 11,
        ..DatasetSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let outcome = train_with(&config, &generated.splits, Objective::Margined).unwrap();
        dump_artifacts(dir.path(), &config, &outcome, &generated.splits).unwrap();
        files.push(std::fs::read(dir.path().join("metrics.csv")).unwrap());
    }
    Outcome {
        id: "8",
        name: "determinism",
        pass: files[0] == files[1] && !files[0].is_empty(),
        detail: format!("metrics.csv {} bytes, identical {}", files[0].len(), files[0] == files[1]),
    }
}

fn main() {
    let outcomes = [
        gradient_oracle(),
        zero_margin_equivalence(),
        streaming_statistics(),
        label_codec(),
        label_decode_interior(),
        curriculum_invariants(),
        end_to_end(),
        epsilon_values(),
        determinism(),
    ];
    for o in &outcomes {
        let status = match (o.pass, KNOWN_GAPS.contains(&o.id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => "FAIL",
        };
        println!("criterion {} {}: {status} - {}", o.id, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_GAPS.contains(&o.id))
        .map(|o| o.id)
        .collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
