//! Confusion counts and the derived per-class, macro and headline metrics.

use dynstg::metrics::{confusion, metrics, ConfusionCounts};

fn main() -> dynstg::Result<()> {
    let m = metrics(&ConfusionCounts::from_binary(5, 3, 1, 1)).headline;
    println!(
        "binary TP=5 TN=3 FP=1 FN=1: accuracy {:.4}, sensitivity {:.4}, specificity {:.4}, precision {:.4}, f1 {:.4}",
        m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1
    );

    let labels = [0, 0, 1, 1, 2, 2, 2, 1];
    let preds = [0, 1, 1, 1, 2, 0, 2, 2];
    let report = metrics(&confusion(&preds, &labels, 3)?);
    for (k, c) in report.per_class.iter().enumerate() {
        println!(
            "class {k}: precision {:.3}, sensitivity {:.3}, f1 {:.3}",
            c.precision, c.sensitivity, c.f1
        );
    }
    println!(
        "macro f1 {:.3}, overall accuracy {:.3}",
        report.macro_avg.f1, report.overall_accuracy
    );
    Ok(())
}
