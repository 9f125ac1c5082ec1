//! The distillation objective of a student against a frozen teacher on one batch.

use dynstg::autodiff::Tape;
use dynstg::data::{batch, synth_gait, SynthSpec};
use dynstg::distill::{cgrkd, total_cgrkd, DistillConfig, MemoryBank};
use dynstg::graph::SkeletonTopology;
use dynstg::model::{Model, ModelConfig};

fn main() -> dynstg::Result<()> {
    let data = synth_gait(&SynthSpec::default())?;
    let (x, labels) = batch(data.iter().step_by(5))?;
    let topo = SkeletonTopology::lower_body(5);
    let teacher = Model::init(ModelConfig::teacher(topo.clone(), 3, 2, 0))?;
    let student = Model::init(ModelConfig::student(topo, 3, 2, 1))?;
    let cfg = DistillConfig::default();

    let mut bank = MemoryBank::new(teacher.config.graph_out, cfg.memory_capacity)?;
    for step in 0..2 {
        let t_out = teacher.forward_values(&x)?;
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let s = student.forward(&mut tape, &bound, xv)?;
        let comps = cgrkd(&mut tape, &s, &t_out, &labels, &bank, &cfg)?;
        let c = comps.values(&tape);
        println!(
            "step {step}: bank {:>2}, task {:.4}, align {:.4}, intra {:.4}, memory {:.4}, region {:.4}, total {:.4}",
            bank.len(),
            c.task,
            c.align,
            c.intra,
            c.memory,
            c.region,
            total_cgrkd(&c, &cfg)
        );
        bank.update(&t_out.joint_embeddings)?;
    }
    Ok(())
}
