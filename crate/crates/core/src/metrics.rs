//! Confusion counts and classification metrics.
//!
//! Counts are one-vs-rest per class and add elementwise, so per-fold or
//! per-thread partials merge in any order. A metric whose denominator is
//! zero is reported as 0 and named in `undefined`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn add(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
    /// Predictions equal to their label.
    pub correct: u64,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn empty(k: usize) -> Self {
        Self {
            per_class: vec![ClassCounts::default(); k],
            correct: 0,
            total: 0,
        }
    }

    /// Binary counts where the given values describe class 1.
    pub fn from_binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self {
            per_class: vec![
                ClassCounts {
                    tp: tn,
                    tn: tp,
                    fp: fn_,
                    fn_: fp,
                },
                ClassCounts { tp, tn, fp, fn_ },
            ],
            correct: tp + tn,
            total: tp + tn + fp + fn_,
        }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::contract(format!(
                "cannot merge counts over {} and {} classes",
                self.classes(),
                other.classes()
            )));
        }
        self.per_class
            .iter_mut()
            .zip(&other.per_class)
            .for_each(|(a, b)| a.add(b));
        self.correct += other.correct;
        self.total += other.total;
        Ok(())
    }
}

/// One-vs-rest counts of `predictions` against `labels` over `k` classes.
pub fn confusion(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::empty(k);
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::contract(format!(
                "class index out of range for {k} classes"
            )));
        }
        for (c, cc) in counts.per_class.iter_mut().enumerate() {
            match (p == c, y == c) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
        }
        counts.correct += u64::from(p == y);
        counts.total += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(c: &ClassCounts) -> Self {
        let mut undefined = Vec::new();
        let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut undefined);
        let sensitivity = ratio(c.tp, c.tp + c.fn_, "sensitivity", &mut undefined);
        let specificity = ratio(c.tn, c.tn + c.fp, "specificity", &mut undefined);
        let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
        let f1 = if precision + sensitivity > 0.0 {
            2.0 * precision * sensitivity / (precision + sensitivity)
        } else {
            undefined.push("f1".into());
            0.0
        };
        Self {
            accuracy,
            sensitivity,
            specificity,
            precision,
            f1,
            undefined,
        }
    }

    /// Unweighted mean of each metric; nothing is flagged.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let rows: Vec<&Metrics> = rows.into_iter().collect();
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| rows.iter().map(|m| f(m)).sum::<f64>() / n;
        Self {
            accuracy: avg(|m| m.accuracy),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
            precision: avg(|m| m.precision),
            f1: avg(|m| m.f1),
            undefined: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<Metrics>,
    pub macro_avg: Metrics,
    /// Class 1 for binary tasks, the macro average otherwise.
    pub headline: Metrics,
    /// Fraction of predictions equal to their label.
    pub overall_accuracy: f64,
}

pub fn metrics(counts: &ConfusionCounts) -> MetricsReport {
    let per_class: Vec<Metrics> = counts.per_class.iter().map(Metrics::from_counts).collect();
    let macro_avg = Metrics::mean(&per_class);
    let headline = if per_class.len() == 2 {
        per_class[1].clone()
    } else {
        macro_avg.clone()
    };
    let overall_accuracy = if counts.total == 0 {
        0.0
    } else {
        counts.correct as f64 / counts.total as f64
    };
    MetricsReport {
        per_class,
        macro_avg,
        headline,
        overall_accuracy,
    }
}
