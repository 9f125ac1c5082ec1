//! The `dynstg` command line.
//!
//! Exit codes: 0 success, 1 configuration or data error, 2 a failed check,
//! 3 training divergence (the last finite checkpoint is still written).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use crate::data::{self, SynthSpec};
use crate::error::{Error, Result};
use crate::harness::gradcheck::{run_suite, SuiteConfig};
use crate::harness::{
    distill_student, evaluate, fold_data, run_cv, train_teacher, DataSource, FoldSeeds, Profile,
    RunConfig, TrainOutcome,
};
use crate::metrics::metrics;
use crate::model::Model;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_CHECK: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "dynstg",
    version,
    about = "Skeleton gait classification with distilled graph state-space models"
)]
pub struct Cli {
    /// Run configuration (JSON); fields present override the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic gait set as `dataset.jsonl`.
    Synth,
    /// Trains a teacher on the training split of one fold.
    TrainTeacher {
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Distills a student from a teacher checkpoint on one fold.
    DistillStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluates a checkpoint on the test split of one fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Full k-fold cross-validation of teacher and student.
    Cv,
    /// Finite-difference check of every primitive, layer, loss and model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(cli.profile, path)?,
        None => RunConfig::profile(cli.profile),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn finish_training(out: &Path, name: &str, outcome: TrainOutcome) -> Result<i32> {
    outcome.model.save(out.join(format!("{name}.json")))?;
    write_json(out, &format!("{name}_log.json"), &outcome.log)?;
    match outcome.divergence {
        Some(d) => {
            eprintln!(
                "error: {name} training diverged at epoch {}, step {} (loss {}); wrote the last finite checkpoint",
                d.epoch, d.step, d.loss
            );
            Ok(EXIT_DIVERGED)
        }
        None => {
            if let Some(last) = outcome.log.last() {
                println!(
                    "{name}: final loss {:.6}, train accuracy {:.4}, eval accuracy {}",
                    last.loss,
                    last.train_accuracy,
                    last.eval_accuracy
                        .map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            Ok(EXIT_OK)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => {
            let spec = match &cfg.data {
                DataSource::Synth(s) => SynthSpec {
                    seed: cli.seed.unwrap_or(s.seed),
                    ..s.clone()
                },
                DataSource::File { .. } => {
                    return Err(Error::Config("synth needs a synthetic data source".into()))
                }
            };
            let seqs = data::synth_gait(&spec)?;
            let path = out.join("dataset.jsonl");
            data::write_sequences(&path, &seqs)?;
            println!("wrote {} sequences to {}", seqs.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::TrainTeacher { fold } => {
            let dataset = cfg.dataset()?;
            let plan = data::make_folds(&dataset, cfg.folds, cfg.seed)?;
            let fd = fold_data(&dataset, &plan, *fold)?;
            write_json(out, "folds.json", &plan)?;
            write_json(out, "normstats.json", &fd.stats)?;
            let seeds = FoldSeeds::new(cfg.seed, *fold);
            let model = Model::init(cfg.model_config(&dataset, false, seeds.teacher_init)?)?;
            let outcome = train_teacher(
                model,
                &fd.train,
                Some(&fd.test),
                &cfg.optim,
                cfg.epochs_teacher,
                seeds.teacher_shuffle,
            )?;
            finish_training(out, "teacher", outcome)
        }
        Command::DistillStudent { teacher, fold } => {
            let teacher = Model::load(teacher)?;
            let dataset = cfg.dataset()?;
            let plan = data::make_folds(&dataset, cfg.folds, cfg.seed)?;
            let fd = fold_data(&dataset, &plan, *fold)?;
            let seeds = FoldSeeds::new(cfg.seed, *fold);
            let student = Model::init(cfg.model_config(&dataset, true, seeds.student_init)?)?;
            let outcome = distill_student(
                student,
                &teacher,
                &fd.train,
                Some(&fd.test),
                &cfg.distill,
                &cfg.optim,
                cfg.epochs_student,
                seeds.student_shuffle,
            )?;
            finish_training(out, "student", outcome)
        }
        Command::Eval { checkpoint, fold } => {
            let model = Model::load(checkpoint)?;
            let dataset = cfg.dataset()?;
            let plan = data::make_folds(&dataset, cfg.folds, cfg.seed)?;
            let fd = fold_data(&dataset, &plan, *fold)?;
            let report = metrics(&evaluate(&model, &fd.test, cfg.optim.batch_size)?);
            write_json(out, "eval.json", &report)?;
            let h = &report.headline;
            println!(
                "fold {fold}: accuracy {:.4}, sensitivity {:.4}, specificity {:.4}, precision {:.4}, f1 {:.4}",
                h.accuracy, h.sensitivity, h.specificity, h.precision, h.f1
            );
            Ok(EXIT_OK)
        }
        Command::Cv => {
            let outcome = run_cv(&cfg)?;
            write_json(out, "report.json", &outcome.report)?;
            write_json(out, "folds.json", &outcome.plan)?;
            write_json(out, "normstats.json", &outcome.norm_stats)?;
            let ckpt = out.join("checkpoints");
            std::fs::create_dir_all(&ckpt)?;
            for (i, (t, s)) in outcome.teachers.iter().zip(&outcome.students).enumerate() {
                t.save(ckpt.join(format!("teacher_fold{i}.json")))?;
                s.save(ckpt.join(format!("student_fold{i}.json")))?;
            }
            println!(
                "{:>8} {:>10} {:>10} {:>10} {:>10}",
                "fold", "t_acc", "t_f1", "s_acc", "s_f1"
            );
            for r in &outcome.report.table {
                println!(
                    "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    r.row, r.teacher_accuracy, r.teacher_f1, r.student_accuracy, r.student_f1
                );
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { corrupt_grad } => {
            let report = run_suite(&SuiteConfig {
                seed: cfg.seed,
                corrupt_analytic: *corrupt_grad,
                ..Default::default()
            })?;
            write_json(out, "gradcheck.json", &report)?;
            for p in &report.primitives {
                println!(
                    "{:<24} trials {:>4}  max rel {:.3e}",
                    p.op, p.trials, p.max_rel_error
                );
            }
            for c in &report.checks {
                println!(
                    "{:<24} params {:>4}  max rel {:.3e}",
                    c.label,
                    c.params.len(),
                    c.max_rel_error
                );
            }
            if report.pass {
                println!("gradcheck passed");
                Ok(EXIT_OK)
            } else {
                for f in report.failures() {
                    eprintln!("FAIL {f}");
                }
                Ok(EXIT_CHECK)
            }
        }
    }
}
