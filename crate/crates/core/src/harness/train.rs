use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, SkeletonSequence};
use crate::distill::{self, Components, DistillConfig, MemoryBank};
use crate::error::{Error, Result};
use crate::harness::{Adam, OptimConfig};
use crate::metrics::{confusion, ConfusionCounts};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy of the pre-update predictions on each training batch.
    pub train_accuracy: f64,
    /// Accuracy on the held-out split after the epoch, when one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    /// Mean of each distillation component; absent for teacher training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Components>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::Divergence {
            epoch: d.epoch,
            step: d.step,
            loss: d.loss,
        }
    }
}

/// A trained model and its loss curve. When training diverged, `model`
/// holds the last parameters that were all finite.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub divergence: Option<Divergence>,
}

impl TrainOutcome {
    /// The model, or the divergence as an error.
    pub fn into_result(self) -> Result<(Model, Vec<EpochLog>)> {
        match self.divergence {
            Some(d) => Err(d.into()),
            None => Ok((self.model, self.log)),
        }
    }
}

fn all_finite(p: &ParamStore) -> bool {
    p.iter()
        .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
}

struct Loop<'a> {
    data: &'a [SkeletonSequence],
    indices: Vec<usize>,
    optim: &'a OptimConfig,
    rng: ChaCha8Rng,
}

impl<'a> Loop<'a> {
    fn new(data: &'a [SkeletonSequence], optim: &'a OptimConfig, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok(Self {
            data,
            indices: (0..data.len()).collect(),
            optim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Seeded order for one epoch; the last batch may be short.
    fn batches(&mut self) -> Result<Vec<(Tensor, Vec<usize>)>> {
        self.indices.shuffle(&mut self.rng);
        self.indices
            .chunks(self.optim.batch_size)
            .map(|c| data::batch(c.iter().map(|&i| &self.data[i])))
            .collect()
    }
}

/// Supervised teacher training on `train` with the task loss.
pub fn train_teacher(
    mut model: Model,
    train: &[SkeletonSequence],
    eval: Option<&[SkeletonSequence]>,
    optim: &OptimConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut lp = Loop::new(train, optim, seed)?;
    let mut adam = Adam::new(optim.clone(), &model.params);
    let mut log = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let mut correct = 0;
        let batches = lp.batches()?;
        for (x, labels) in &batches {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let out = model.forward(&mut tape, &bound, xv)?;
            let loss = distill::loss_task(&mut tape, out.joint_logits, labels)?;
            correct += hits(tape.value(out.seq_logits), labels);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                warn!("teacher diverged at epoch {epoch}, step {step}: loss {value}");
                let divergence = Some(Divergence {
                    epoch,
                    step,
                    loss: value,
                });
                return Ok(TrainOutcome {
                    model,
                    log,
                    divergence,
                });
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            let before = model.params.clone();
            adam.step(&mut model.params, &grads)?;
            if !all_finite(&model.params) {
                warn!("teacher parameters became non-finite at epoch {epoch}, step {step}");
                model.params = before;
                let divergence = Some(Divergence {
                    epoch,
                    step,
                    loss: value,
                });
                return Ok(TrainOutcome {
                    model,
                    log,
                    divergence,
                });
            }
            sum += value;
            step += 1;
        }
        let loss = sum / batches.len() as f64;
        debug!("teacher epoch {epoch}: loss {loss:.6}");
        log.push(EpochLog {
            epoch,
            loss,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_accuracy: eval_accuracy(&model, eval, optim.batch_size)?,
            components: None,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        divergence: None,
    })
}

/// Student training against a frozen teacher. The memory bank starts empty
/// and receives the teacher's joint embeddings after each batch's losses.
pub fn distill_student(
    mut student: Model,
    teacher: &Model,
    train: &[SkeletonSequence],
    eval: Option<&[SkeletonSequence]>,
    distill_cfg: &DistillConfig,
    optim: &OptimConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    distill_cfg.validate()?;
    if student.config.topology != teacher.config.topology {
        return Err(Error::Config(
            "student and teacher topologies differ".into(),
        ));
    }
    if student.config.graph_out != teacher.config.graph_out
        || student.config.num_classes != teacher.config.num_classes
    {
        return Err(Error::Config(
            "student and teacher must share graph width and class count".into(),
        ));
    }
    let mut lp = Loop::new(train, optim, seed)?;
    let mut adam = Adam::new(optim.clone(), &student.params);
    let mut bank = MemoryBank::new(teacher.config.graph_out, distill_cfg.memory_capacity)?;
    let mut log = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let mut correct = 0;
        let mut comp_sum = Components::default();
        let batches = lp.batches()?;
        for (x, labels) in &batches {
            let t_out = teacher.forward_values(x)?;
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let s_vars = student.forward(&mut tape, &bound, xv)?;
            correct += hits(tape.value(s_vars.seq_logits), labels);
            let comps = distill::cgrkd(&mut tape, &s_vars, &t_out, labels, &bank, distill_cfg)?;
            let value = tape.value(comps.total).data()[0];
            if !value.is_finite() {
                warn!("student diverged at epoch {epoch}, step {step}: loss {value}");
                let divergence = Some(Divergence {
                    epoch,
                    step,
                    loss: value,
                });
                return Ok(TrainOutcome {
                    model: student,
                    log,
                    divergence,
                });
            }
            tape.backward(comps.total)?;
            let grads = bound.grads(&tape);
            let before = student.params.clone();
            adam.step(&mut student.params, &grads)?;
            if !all_finite(&student.params) {
                warn!("student parameters became non-finite at epoch {epoch}, step {step}");
                student.params = before;
                let divergence = Some(Divergence {
                    epoch,
                    step,
                    loss: value,
                });
                return Ok(TrainOutcome {
                    model: student,
                    log,
                    divergence,
                });
            }
            bank.update(&t_out.joint_embeddings)?;
            let c = comps.values(&tape);
            comp_sum.task += c.task;
            comp_sum.align += c.align;
            comp_sum.intra += c.intra;
            comp_sum.memory += c.memory;
            comp_sum.region += c.region;
            sum += value;
            step += 1;
        }
        let n = batches.len() as f64;
        let loss = sum / n;
        debug!("student epoch {epoch}: loss {loss:.6}");
        log.push(EpochLog {
            epoch,
            loss,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_accuracy: eval_accuracy(&student, eval, optim.batch_size)?,
            components: Some(Components {
                task: comp_sum.task / n,
                align: comp_sum.align / n,
                intra: comp_sum.intra / n,
                memory: comp_sum.memory / n,
                region: comp_sum.region / n,
            }),
        });
    }
    Ok(TrainOutcome {
        model: student,
        log,
        divergence: None,
    })
}

/// Argmax of each row of `[B, K]` logits; ties go to the lowest class.
pub fn predict(seq_logits: &Tensor) -> Vec<usize> {
    let k = seq_logits.shape()[1];
    seq_logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

fn hits(seq_logits: &Tensor, labels: &[usize]) -> usize {
    predict(seq_logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

fn eval_accuracy(
    model: &Model,
    eval: Option<&[SkeletonSequence]>,
    batch_size: usize,
) -> Result<Option<f64>> {
    match eval {
        Some(e) if !e.is_empty() => {
            let c = evaluate(model, e, batch_size)?;
            Ok(Some(c.correct as f64 / c.total as f64))
        }
        _ => Ok(None),
    }
}

/// Confusion counts of `model` on `test`, evaluated in batches.
pub fn evaluate(
    model: &Model,
    test: &[SkeletonSequence],
    batch_size: usize,
) -> Result<ConfusionCounts> {
    let k = model.config.num_classes;
    let mut counts = ConfusionCounts::empty(k);
    for chunk in test.chunks(batch_size.max(1)) {
        let (x, labels) = data::batch(chunk)?;
        let out = model.forward_values(&x)?;
        counts.merge(&confusion(&predict(&out.seq_logits), &labels, k)?)?;
    }
    Ok(counts)
}
