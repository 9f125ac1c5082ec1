//! Teacher and student architectures on the same skeleton.

use dynstg::graph::SkeletonTopology;
use dynstg::model::{Model, ModelConfig};
use dynstg::params::uniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dynstg::Result<()> {
    let topo = SkeletonTopology::lower_body(5);
    let teacher = Model::init(ModelConfig::teacher(topo.clone(), 3, 2, 0))?;
    let student = Model::init(ModelConfig::student(topo, 3, 2, 1))?;
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[2, 32, 5, 3], 1.0);
    for (name, m) in [("teacher", &teacher), ("student", &student)] {
        let out = m.forward_values(&x)?;
        println!(
            "{name}: {} parameters, {} ops per forward, joint logits {:?}, seq logits {:?}",
            m.param_count(),
            m.forward_op_count(&x)?,
            out.joint_logits.shape(),
            out.seq_logits.data()
        );
    }
    Ok(())
}
