//! A short cross-validation run of teacher and distilled student.

use dynstg::harness::{run_cv, Profile, RunConfig};

fn main() -> dynstg::Result<()> {
    let mut cfg = RunConfig::profile(Profile::Ci);
    cfg.epochs_teacher = 10;
    cfg.epochs_student = 5;
    cfg.folds = 3;
    let outcome = run_cv(&cfg)?;
    let r = &outcome.report;
    println!(
        "{} sequences, teacher {} / student {} parameters",
        r.dataset_size, r.param_counts.teacher, r.param_counts.student
    );
    for row in &r.table {
        println!(
            "{:>8}: teacher acc {:.3} f1 {:.3}, student acc {:.3} f1 {:.3}",
            row.row, row.teacher_accuracy, row.teacher_f1, row.student_accuracy, row.student_f1
        );
    }
    println!("took {:.1}s", r.timings.total_seconds);
    Ok(())
}
