//! Synthetic gait data through augmentation, fold planning and standardization.

use dynstg::data::{augment_dataset, make_folds, synth_gait, SynthSpec, DEFAULT_VERTICAL_SCALE};
use dynstg::harness::fold_data;

fn main() -> dynstg::Result<()> {
    let base = synth_gait(&SynthSpec::default())?;
    let data = augment_dataset(&base, DEFAULT_VERTICAL_SCALE)?;
    println!(
        "{} sequences ({} base), {} frames x {} joints",
        data.len(),
        base.len(),
        data[0].frame_count(),
        data[0].joint_count()
    );
    let plan = make_folds(&data, 5, 0)?;
    for fold in 0..5 {
        let fd = fold_data(&data, &plan, fold)?;
        let ones = fd.test.iter().filter(|s| s.label == 1).count();
        println!(
            "fold {fold}: train {:>2}, test {:>2} ({ones} of class 1), first feature mean {:+.3} std {:.3}",
            fd.train.len(),
            fd.test.len(),
            fd.stats.mean.data()[0],
            fd.stats.std.data()[0]
        );
    }
    Ok(())
}
