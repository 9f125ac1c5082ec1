//! Cross-graph relational distillation losses and the teacher memory bank.
//!
//! All teacher-side inputs are detached, so no gradient reaches teacher
//! parameters. Relational losses compare row distributions
//! `softmax(cos(·,·)/τ)` with `KL(student ‖ teacher)`, averaged over the
//! anchor rows (joints).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormGuard, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ModelOutput, ModelVars};
use crate::tensor::Tensor;

/// Norm floor of the cosine similarity; zero vectors get similarity 0.
pub const COSINE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub kd_temperature: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub memory_capacity: usize,
    /// Includes the logit alignment term; off only for ablations.
    pub align: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kd_temperature: 4.0,
            tau: 0.1,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            memory_capacity: 256,
            align: true,
        }
    }
}

impl DistillConfig {
    /// Task loss only: no alignment and zero relational weights.
    pub fn ablated() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            align: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kd_temperature > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config(
                "distillation temperatures must be positive".into(),
            ));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        for (n, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !w.is_finite() {
                return Err(Error::Config(format!("{n} must be finite")));
            }
        }
        Ok(())
    }
}

/// FIFO queue of teacher joint embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        Ok(Self {
            dim,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Enqueues every `[.., O]` row of `embeddings` in row-major order
    /// (batch-major, joint-minor), evicting the oldest beyond capacity.
    pub fn update(&mut self, embeddings: &Tensor) -> Result<()> {
        if embeddings.shape().last() != Some(&self.dim) {
            return Err(Error::shape(
                "memory_update",
                embeddings.shape(),
                &[self.dim],
            ));
        }
        if self.dim == 0 {
            return Ok(());
        }
        for row in embeddings.data().chunks(self.dim) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.to_vec());
        }
        Ok(())
    }

    /// `[M, O]`, oldest first; `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flatten().copied().collect();
        Tensor::new(vec![self.entries.len(), self.dim], data).ok()
    }
}

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Mean over rows of `KL(softmax(s) ‖ softmax(t))` along the last axis;
/// `t` is detached.
pub fn kl_rows(tape: &mut Tape, s_logits: Var, t_logits: Var) -> Result<Var> {
    check_same("kl_rows", tape, s_logits, t_logits)?;
    let axis = tape
        .shape(s_logits)
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::contract("kl_rows needs an axis"))?;
    let t_logits = tape.detach(t_logits);
    let log_s = tape.log_softmax(s_logits, axis)?;
    let log_t = tape.log_softmax(t_logits, axis)?;
    let p_s = tape.softmax(s_logits, axis)?;
    let diff = tape.sub(log_s, log_t)?;
    let terms = tape.mul(p_s, diff)?;
    let per_row = tape.sum(terms, axis)?;
    Ok(tape.mean_all(per_row))
}

/// Cosine similarities `[B, P, Q]` between rows of `a` (`[B, P, O]`) and
/// `b` (`[B, Q, O]` or a shared `[Q, O]`).
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize(a, COSINE_EPSILON, NormGuard::Clamp)?;
    let bn = tape.l2_normalize(b, COSINE_EPSILON, NormGuard::Clamp)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

fn relation_kl(tape: &mut Tape, s: (Var, Var), t: (Var, Var), tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!(
            "relational temperature must be positive, got {tau}"
        )));
    }
    let (t0, t1) = (tape.detach(t.0), tape.detach(t.1));
    let rs = cosine_similarity(tape, s.0, s.1)?;
    let rt = cosine_similarity(tape, t0, t1)?;
    let rs = tape.scale(rs, 1.0 / tau);
    let rt = tape.scale(rt, 1.0 / tau);
    kl_rows(tape, rs, rt)
}

/// Mean cross-entropy of every `(frame, joint)` logit row against the
/// sequence label.
pub fn loss_task(tape: &mut Tape, joint_logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(joint_logits).to_vec();
    let [b, _, _, k] = shape[..] else {
        return Err(Error::shape("loss_task", &shape, &[labels.len(), 0, 0, 0]));
    };
    if labels.len() != b {
        return Err(Error::shape("loss_task", &shape, &[labels.len()]));
    }
    let mut onehot = Tensor::zeros(&[b, 1, 1, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        onehot.set(&[i, 0, 0, y], 1.0);
    }
    let onehot = tape.constant(onehot);
    let log_p = tape.log_softmax(joint_logits, 3)?;
    let picked = tape.mul(log_p, onehot)?;
    let picked = tape.sum(picked, 3)?;
    let mean = tape.mean_all(picked);
    Ok(tape.neg(mean))
}

/// `KL(softmax(Z_s/T) ‖ softmax(Z_t/T))` averaged over positions.
pub fn loss_align(tape: &mut Tape, z_s: Var, z_t: Var, kd_temperature: f64) -> Result<Var> {
    if !(kd_temperature > 0.0) {
        return Err(Error::contract(format!(
            "kd temperature must be positive, got {kd_temperature}"
        )));
    }
    let s = tape.scale(z_s, 1.0 / kd_temperature);
    let t = tape.scale(z_t, 1.0 / kd_temperature);
    kl_rows(tape, s, t)
}

/// Joint-to-joint relations within each sample.
pub fn loss_intra(tape: &mut Tape, f_s: Var, f_t: Var, tau: f64) -> Result<Var> {
    check_same("loss_intra", tape, f_s, f_t)?;
    relation_kl(tape, (f_s, f_s), (f_t, f_t), tau)
}

/// Joint-to-memory relations; zero (with a warning) while the bank is empty.
pub fn loss_memory(
    tape: &mut Tape,
    f_s: Var,
    bank: &MemoryBank,
    f_t: Var,
    tau: f64,
) -> Result<Var> {
    check_same("loss_memory", tape, f_s, f_t)?;
    let Some(entries) = bank.to_tensor() else {
        log::warn!("memory bank is empty; memory loss is zero for this batch");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let m = tape.constant(entries);
    relation_kl(tape, (f_s, m), (f_t, m), tau)
}

/// Joint-to-region relations. Each side relates its own joint embeddings to
/// its own region embeddings.
pub fn loss_region(
    tape: &mut Tape,
    f_s: Var,
    r_s: Var,
    f_t: Var,
    r_t: Var,
    tau: f64,
) -> Result<Var> {
    check_same("loss_region", tape, f_s, f_t)?;
    check_same("loss_region", tape, r_s, r_t)?;
    relation_kl(tape, (f_s, r_s), (f_t, r_t), tau)
}

/// Values of the five loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub task: f64,
    pub align: f64,
    pub intra: f64,
    pub memory: f64,
    pub region: f64,
}

/// `task + align + α·intra + β·memory + γ·region` (align dropped when disabled).
pub fn total_cgrkd(c: &Components, cfg: &DistillConfig) -> f64 {
    let align = if cfg.align { c.align } else { 0.0 };
    c.task + align + cfg.alpha * c.intra + cfg.beta * c.memory + cfg.gamma * c.region
}

/// Tape handles for each component and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct ComponentVars {
    pub task: Var,
    pub align: Var,
    pub intra: Var,
    pub memory: Var,
    pub region: Var,
    pub total: Var,
}

impl ComponentVars {
    pub fn values(&self, tape: &Tape) -> Components {
        let v = |x: Var| tape.value(x).data()[0];
        Components {
            task: v(self.task),
            align: v(self.align),
            intra: v(self.intra),
            memory: v(self.memory),
            region: v(self.region),
        }
    }
}

/// Records all components for one batch. The teacher outputs enter as
/// constants; `bank` is read as it stands, before any update for this batch.
pub fn cgrkd(
    tape: &mut Tape,
    student: &ModelVars,
    teacher: &ModelOutput,
    labels: &[usize],
    bank: &MemoryBank,
    cfg: &DistillConfig,
) -> Result<ComponentVars> {
    let zero = || Tensor::scalar(0.0);
    let task = loss_task(tape, student.joint_logits, labels)?;
    let align = if cfg.align {
        let z_t = tape.constant(teacher.joint_logits.clone());
        loss_align(tape, student.joint_logits, z_t, cfg.kd_temperature)?
    } else {
        tape.constant(zero())
    };
    let f_t = tape.constant(teacher.joint_embeddings.clone());
    let intra = if cfg.alpha != 0.0 {
        loss_intra(tape, student.joint_embeddings, f_t, cfg.tau)?
    } else {
        tape.constant(zero())
    };
    let memory = if cfg.beta != 0.0 {
        loss_memory(tape, student.joint_embeddings, bank, f_t, cfg.tau)?
    } else {
        tape.constant(zero())
    };
    let region = if cfg.gamma != 0.0 {
        let r_t = tape.constant(teacher.region_embeddings.clone());
        loss_region(
            tape,
            student.joint_embeddings,
            student.region_embeddings,
            f_t,
            r_t,
            cfg.tau,
        )?
    } else {
        tape.constant(zero())
    };
    let mut total = task;
    if cfg.align {
        total = tape.add(total, align)?;
    }
    for (w, c) in [(cfg.alpha, intra), (cfg.beta, memory), (cfg.gamma, region)] {
        if w != 0.0 {
            let weighted = tape.scale(c, w);
            total = tape.add(total, weighted)?;
        }
    }
    Ok(ComponentVars {
        task,
        align,
        intra,
        memory,
        region,
        total,
    })
}
