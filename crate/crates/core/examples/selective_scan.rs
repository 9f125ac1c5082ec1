//! Discretized selective scan: the chunked kernel against the step loop.

use dynstg::params::uniform;
use dynstg::ssm::{discretize_values, scan_chunked, scan_loop, DEFAULT_STATE_EPSILON};
use dynstg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dynstg::Result<()> {
    let (b, t, d, n) = (2, 24, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let delta_raw = uniform(&mut rng, &[b, t, d], 1.0);
    let delta_bias = Tensor::zeros(&[d]);
    let a = Tensor::from_fn(&[d, n], |i| -1.0 - i[1] as f64);
    let bm = uniform(&mut rng, &[b, t, n], 1.0);
    let u = uniform(&mut rng, &[b, t, d], 1.0);
    let (da, dbu) = discretize_values(&delta_raw, &delta_bias, &a, &bm, &u)?;
    let reference = scan_loop(&da, &dbu, DEFAULT_STATE_EPSILON)?;
    for chunk in [1, 4, 8, 32] {
        let h = scan_chunked(&da, &dbu, DEFAULT_STATE_EPSILON, chunk)?;
        let diff = h
            .data()
            .iter()
            .zip(reference.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        println!("chunk {chunk:>2}: max abs diff {diff:.2e}");
    }
    println!(
        "final state of sample 0, channel 0: {:?}",
        (0..n)
            .map(|k| reference.at(&[0, t - 1, 0, k]))
            .collect::<Vec<_>>()
    );
    Ok(())
}
