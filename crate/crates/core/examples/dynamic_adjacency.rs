//! Masked dynamic adjacency over a lower-body skeleton and the block
//! spatio-temporal adjacency built from it.

use dynstg::graph::{build_block_adjacency, build_dynamic_adjacency, SkeletonTopology};
use dynstg::params::uniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dynstg::Result<()> {
    let topo = SkeletonTopology::lower_body(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f_base = uniform(&mut rng, &[5, 5], 1.0);
    let a = build_dynamic_adjacency(&f_base, &topo)?;
    println!("edges {:?}", topo.edges);
    for r in 0..5 {
        let row: Vec<String> = (0..5).map(|c| format!("{:.3}", a.at(&[r, c]))).collect();
        println!("  {}", row.join(" "));
    }

    let a_t = uniform(&mut rng, &[5, 5], 0.1);
    let block = build_block_adjacency(&a, &a_t, 3)?;
    println!("block adjacency {:?}", block.matrix.shape());
    let nonzero: Vec<String> = (0..3)
        .map(|r| {
            (0..3)
                .map(|c| {
                    if block.block(r, c).data().iter().any(|&v| v != 0.0) {
                        "#"
                    } else {
                        "."
                    }
                })
                .collect()
        })
        .collect();
    println!("block pattern {}", nonzero.join("/"));
    Ok(())
}
