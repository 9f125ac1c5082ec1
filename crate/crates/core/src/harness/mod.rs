//! Run configuration, optimizer, training loops, cross-validation and the
//! gradient-check suite.
//!
//! ```no_run
//! use dynstg::harness::{run_cv, Profile, RunConfig};
//!
//! let outcome = run_cv(&RunConfig::profile(Profile::Ci)).unwrap();
//! println!("{}", outcome.report.teacher_average.accuracy);
//! ```

mod config;
mod cv;
pub mod gradcheck;
mod optim;
mod train;

pub use config::{
    derive_seed, DataSource, ModelSpec, OptimConfig, Profile, RunConfig, CI_BATCH_SIZE,
};
pub use cv::{
    fold_data, run_cv, CvOutcome, FoldData, FoldResult, FoldSeeds, ModelResult, ParamCounts,
    RunReport, TableRow, Timings, REPORT_FORMAT_VERSION,
};
pub use optim::Adam;
pub use train::{
    distill_student, evaluate, predict, train_teacher, Divergence, EpochLog, TrainOutcome,
};
