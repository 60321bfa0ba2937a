use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pml::config::{Mode, TrainConfig};
use pml::dataset::{generate, DatasetSpec};
use pml::error::{Error, Result};
use pml::model::SavedModel;
use pml::train::{dump_artifacts, evaluate, load_splits, prepare_out_dir, train_with, write_summary_csv, Objective};

#[derive(Parser)]
#[command(name = "pml", version, about = "Progressive margin loss trainer for ordinal age estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pml,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a long-tailed dataset and write train/val/test CSVs.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        n_max: usize,
        #[arg(long, default_value_t = 1.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long)]
        head: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write metrics, margins, statistics and the model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved model on a CSV file or split directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train over a lambda x beta grid and pick the best validation MAE.
    Gridsearch {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        lambda_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        beta_grid: Vec<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn build_config(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for assignment in overrides {
        cfg.apply_override(assignment)?;
    }
    if data.is_some() {
        cfg.data = data;
    }
    if out.is_some() {
        cfg.out = out;
    }
    Ok(cfg)
}

fn data_path(cfg: &TrainConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::Config("no data path; pass --data or set data in the config".into()))
}

fn classes_override(cfg: &TrainConfig) -> Option<usize> {
    (cfg.classes > 0).then_some(cfg.classes)
}

fn objective(cfg: &TrainConfig) -> Objective {
    match cfg.mode {
        Mode::Pml => Objective::Margined,
        Mode::Baseline => Objective::Plain,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            classes,
            dim,
            n_max,
            gamma,
            noise,
            head,
            seed,
        } => {
            let spec = DatasetSpec {
                classes,
                dim,
                n_max,
                tail_exponent: gamma,
                noise_sigma: noise,
                head_class: head,
                seed,
                ..DatasetSpec::default()
            };
            let generated = generate(&spec)?;
            generated.splits.save_dir(&out)?;
            let path = out.join("counts.csv");
            let mut text = String::from("class,count\n");
            for (j, n) in generated.class_counts.iter().enumerate() {
                text.push_str(&format!("{j},{n}\n"));
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!(
                "wrote {} samples ({} train, {} val, {} test) to {}",
                generated.all.len(),
                generated.splits.train.len(),
                generated.splits.val.len(),
                generated.splits.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            mode,
            seed,
            overrides,
        } => {
            let mut cfg = build_config(config.as_deref(), data, out, &overrides)?;
            if let Some(mode) = mode {
                cfg.mode = match mode {
                    ModeArg::Pml => Mode::Pml,
                    ModeArg::Baseline => Mode::Baseline,
                };
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| Error::Config("no output directory; pass --out".into()))?;
            prepare_out_dir(&out)?;
            let splits = load_splits(data_path(&cfg)?, classes_override(&cfg), cfg.seed)?;
            let outcome = train_with(&cfg, &splits, objective(&cfg))?;
            dump_artifacts(&out, &cfg, &outcome, &splits)?;
            let t = &outcome.test;
            println!(
                "test mae {:.4} epsilon {:.4} head {} tail {} after {} epochs",
                t.mae,
                t.epsilon_error,
                t.head_mae.map_or("-".into(), |v| format!("{v:.4}")),
                t.tail_mae.map_or("-".into(), |v| format!("{v:.4}")),
                outcome.epochs()
            );
            Ok(())
        }
        Command::Eval { model, data } => {
            let saved = SavedModel::load(&model)?;
            let classes = saved.model.classes();
            let report = if data.is_dir() {
                let splits = load_splits(&data, Some(classes), 0)?;
                evaluate(&saved.model, &splits.test.with_classes(classes)?, saved.decoder, &saved.train_counts)?
            } else {
                let set = pml::dataset::Dataset::load_csv(&data, Some(classes))?;
                evaluate(&saved.model, &set, saved.decoder, &saved.train_counts)?
            };
            let mut stdout = std::io::stdout();
            write_summary_csv(&mut stdout, &[("eval", &report)]).map_err(|e| Error::io("stdout", e))
        }
        Command::Gridsearch {
            config,
            data,
            out,
            lambda_grid,
            beta_grid,
            overrides,
        } => {
            let mut cfg = build_config(config.as_deref(), data, out, &overrides)?;
            cfg.mode = Mode::Pml;
            cfg.validate()?;
            if lambda_grid.is_empty() || beta_grid.is_empty() {
                return Err(Error::Config("grids must be non-empty".into()));
            }
            if let Some(out) = &cfg.out {
                prepare_out_dir(out)?;
            }
            let splits = load_splits(data_path(&cfg)?, classes_override(&cfg), cfg.seed)?;
            let mut rows = String::from("lambda,beta,val_mae,test_mae,test_tail_mae\n");
            let mut best: Option<(f64, f64, f64)> = None;
            for &lambda in &lambda_grid {
                for &beta in &beta_grid {
                    let mut trial = cfg.clone();
                    trial.lambda = lambda;
                    trial.beta = beta;
                    trial.validate()?;
                    let outcome = train_with(&trial, &splits, Objective::Margined)?;
                    let val = outcome
                        .reports
                        .iter()
                        .map(|r| r.val.mae)
                        .fold(f64::INFINITY, f64::min);
                    rows.push_str(&format!(
                        "{lambda},{beta},{val},{},{}\n",
                        outcome.test.mae,
                        outcome.test.tail_mae.map(|v| v.to_string()).unwrap_or_default()
                    ));
                    if best.is_none_or(|(_, _, b)| val < b) {
                        best = Some((lambda, beta, val));
                    }
                }
            }
            print!("{rows}");
            if let Some((lambda, beta, val)) = best {
                println!("best lambda={lambda} beta={beta} val_mae={val}");
            }
            if let Some(out) = &cfg.out {
                let path = out.join("gridsearch.csv");
                std::fs::write(&path, rows).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
