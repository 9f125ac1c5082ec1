use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, FoldPlan, NormStats, SkeletonSequence};
use crate::error::Result;
use crate::harness::{derive_seed, distill_student, evaluate, train_teacher, EpochLog, RunConfig};
use crate::metrics::{metrics, ConfusionCounts, Metrics, MetricsReport};
use crate::model::Model;

pub const REPORT_FORMAT_VERSION: u32 = 1;

const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_STUDENT_INIT: u64 = 2;
const STREAM_TEACHER_SHUFFLE: u64 = 3;
const STREAM_STUDENT_SHUFFLE: u64 = 4;

/// Seed of every random stream in one fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSeeds {
    pub teacher_init: u64,
    pub student_init: u64,
    pub teacher_shuffle: u64,
    pub student_shuffle: u64,
}

impl FoldSeeds {
    pub fn new(run_seed: u64, fold: usize) -> Self {
        let base = derive_seed(run_seed, fold as u64);
        Self {
            teacher_init: derive_seed(base, STREAM_TEACHER_INIT),
            student_init: derive_seed(base, STREAM_STUDENT_INIT),
            teacher_shuffle: derive_seed(base, STREAM_TEACHER_SHUFFLE),
            student_shuffle: derive_seed(base, STREAM_STUDENT_SHUFFLE),
        }
    }
}

/// Standardized train and test splits of one fold with the fitted statistics.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
    pub stats: NormStats,
}

/// Splits `dataset` by `plan` and standardizes both sides with statistics
/// fitted on the training side only.
pub fn fold_data(dataset: &[SkeletonSequence], plan: &FoldPlan, fold: usize) -> Result<FoldData> {
    let (train_idx, test_idx) = plan.split(dataset, fold)?;
    let (normalized, stats) = data::standardize(dataset, &train_idx)?;
    Ok(FoldData {
        fold,
        train: train_idx.iter().map(|&i| normalized[i].clone()).collect(),
        test: test_idx.iter().map(|&i| normalized[i].clone()).collect(),
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
    pub loss_curve: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seeds: FoldSeeds,
    pub teacher: ModelResult,
    pub student: ModelResult,
}

/// Headline accuracy and F1 of one fold, or of their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// Fold number from 1, or `"average"`.
    pub row: String,
    pub teacher_accuracy: f64,
    pub teacher_f1: f64,
    pub student_accuracy: f64,
    pub student_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub teacher: usize,
    pub student: usize,
}

/// Wall-clock figures, kept apart so the rest of the report is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub fold_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub dataset_size: usize,
    pub param_counts: ParamCounts,
    pub table: Vec<TableRow>,
    /// Mean of the per-fold headline metrics.
    pub teacher_average: Metrics,
    pub student_average: Metrics,
    pub folds: Vec<FoldResult>,
    pub timings: Timings,
}

impl RunReport {
    /// The report as JSON without the `timings` key.
    pub fn reproducible_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("timings");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Everything a cross-validation run produces.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: RunReport,
    pub plan: FoldPlan,
    pub norm_stats: Vec<NormStats>,
    pub teachers: Vec<Model>,
    pub students: Vec<Model>,
}

struct FoldRun {
    result: FoldResult,
    stats: NormStats,
    teacher: Model,
    student: Model,
    seconds: f64,
}

/// Trains a teacher and distills a student on one fold.
fn run_fold(
    cfg: &RunConfig,
    dataset: &[SkeletonSequence],
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldRun> {
    let start = Instant::now();
    let seeds = FoldSeeds::new(cfg.seed, fold);
    let fd = fold_data(dataset, plan, fold)?;
    let teacher = Model::init(cfg.model_config(dataset, false, seeds.teacher_init)?)?;
    let (teacher, t_log) = train_teacher(
        teacher,
        &fd.train,
        Some(&fd.test),
        &cfg.optim,
        cfg.epochs_teacher,
        seeds.teacher_shuffle,
    )?
    .into_result()?;
    let student = Model::init(cfg.model_config(dataset, true, seeds.student_init)?)?;
    let (student, s_log) = distill_student(
        student,
        &teacher,
        &fd.train,
        Some(&fd.test),
        &cfg.distill,
        &cfg.optim,
        cfg.epochs_student,
        seeds.student_shuffle,
    )?
    .into_result()?;
    let t_counts = evaluate(&teacher, &fd.test, cfg.optim.batch_size)?;
    let s_counts = evaluate(&student, &fd.test, cfg.optim.batch_size)?;
    let result = FoldResult {
        fold,
        train_size: fd.train.len(),
        test_size: fd.test.len(),
        seeds,
        teacher: ModelResult {
            metrics: metrics(&t_counts),
            counts: t_counts,
            loss_curve: t_log,
        },
        student: ModelResult {
            metrics: metrics(&s_counts),
            counts: s_counts,
            loss_curve: s_log,
        },
    };
    info!(
        "fold {fold}: teacher accuracy {:.3}, student accuracy {:.3}",
        result.teacher.metrics.headline.accuracy, result.student.metrics.headline.accuracy
    );
    Ok(FoldRun {
        result,
        stats: fd.stats,
        teacher,
        student,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// k-fold cross-validation; folds run in parallel and the report does not
/// depend on scheduling.
pub fn run_cv(cfg: &RunConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let dataset = cfg.dataset()?;
    let plan = data::make_folds(&dataset, cfg.folds, cfg.seed)?;
    let runs: Vec<FoldRun> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| run_fold(cfg, &dataset, &plan, f))
        .collect::<Result<_>>()?;

    let mut table: Vec<TableRow> = runs
        .iter()
        .map(|r| TableRow {
            row: (r.result.fold + 1).to_string(),
            teacher_accuracy: r.result.teacher.metrics.headline.accuracy,
            teacher_f1: r.result.teacher.metrics.headline.f1,
            student_accuracy: r.result.student.metrics.headline.accuracy,
            student_f1: r.result.student.metrics.headline.f1,
        })
        .collect();
    let teacher_average = Metrics::mean(runs.iter().map(|r| &r.result.teacher.metrics.headline));
    let student_average = Metrics::mean(runs.iter().map(|r| &r.result.student.metrics.headline));
    table.push(TableRow {
        row: "average".into(),
        teacher_accuracy: teacher_average.accuracy,
        teacher_f1: teacher_average.f1,
        student_accuracy: student_average.accuracy,
        student_f1: student_average.f1,
    });
    let param_counts = ParamCounts {
        teacher: runs[0].teacher.param_count(),
        student: runs[0].student.param_count(),
    };
    let fold_seconds = runs.iter().map(|r| r.seconds).collect();
    let mut norm_stats = Vec::new();
    let mut teachers = Vec::new();
    let mut students = Vec::new();
    let mut folds = Vec::new();
    for r in runs {
        norm_stats.push(r.stats);
        teachers.push(r.teacher);
        students.push(r.student);
        folds.push(r.result);
    }
    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        dataset_size: dataset.len(),
        param_counts,
        table,
        teacher_average,
        student_average,
        folds,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            fold_seconds,
        },
    };
    Ok(CvOutcome {
        report,
        plan,
        norm_stats,
        teachers,
        students,
    })
}
