//! The graph-selective state-space block.
//!
//! Input `[B, T, D_in]` is projected and split into two `D`-wide branches.
//! The first passes a causal depthwise convolution and SiLU, then drives an
//! input-dependent discretized scan whose states are read out per step; the
//! second becomes a SiLU gate. Gated features are projected to `D_out`.

mod scan;

pub use scan::{
    discretize, discretize_values, scan, scan_chunked, scan_loop, DEFAULT_CHUNK,
    DEFAULT_STATE_EPSILON,
};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, key, Bound, ParamStore};
use crate::tensor::Tensor;

/// Width of the causal depthwise convolution.
pub const CONV_KERNEL: usize = 3;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// `y` with `softplus(y) = x`, for `x > 0`.
pub fn inverse_softplus(x: f64) -> f64 {
    x.exp_m1().ln()
}

/// One state-space block.
///
/// Parameters: `w_split` (`D_in×2D`), `w_conv` (`D×3`), `b_conv` (`D`),
/// `w_proj` (`D×(D+2N)`), `delta_bias` (`D`), `a_raw` (`D×N`, with
/// `A = −softplus(a_raw)`), `d_skip` (`D`), `w_out` (`D×D_out`), `b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct StgMambaBlock {
    pub d_in: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub d_out: usize,
    pub epsilon: f64,
    pub prefix: String,
}

impl StgMambaBlock {
    pub fn new(d_in: usize, d_model: usize, d_state: usize, d_out: usize, prefix: &str) -> Self {
        Self {
            d_in,
            d_model,
            d_state,
            d_out,
            epsilon: DEFAULT_STATE_EPSILON,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, n: &str) -> String {
        key(&self.prefix, n)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (di, d, n, o) = (self.d_in, self.d_model, self.d_state, self.d_out);
        vec![
            (self.name("w_split"), vec![di, 2 * d]),
            (self.name("w_conv"), vec![d, CONV_KERNEL]),
            (self.name("b_conv"), vec![d]),
            (self.name("w_proj"), vec![d, d + 2 * n]),
            (self.name("delta_bias"), vec![d]),
            (self.name("a_raw"), vec![d, n]),
            (self.name("d_skip"), vec![d]),
            (self.name("w_out"), vec![d, o]),
            (self.name("b_out"), vec![o]),
        ]
    }

    /// Affine maps `U(±1/√fan_in)`, biases zero, `d_skip = 1`,
    /// `A[d, n] = −(n+1)`, and `softplus(delta_bias)` log-uniform in
    /// `[1e-3, 1e-1]`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (di, d, n, o) = (self.d_in, self.d_model, self.d_state, self.d_out);
        store.insert(self.name("w_split"), fan_in_uniform(rng, &[di, 2 * d], di));
        store.insert(
            self.name("w_conv"),
            fan_in_uniform(rng, &[d, CONV_KERNEL], CONV_KERNEL),
        );
        store.insert(self.name("b_conv"), Tensor::zeros(&[d]));
        store.insert(self.name("w_proj"), fan_in_uniform(rng, &[d, d + 2 * n], d));
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        store.insert(
            self.name("delta_bias"),
            Tensor::from_fn(&[d], |_| inverse_softplus(rng.random_range(lo..=hi).exp())),
        );
        store.insert(
            self.name("a_raw"),
            Tensor::from_fn(&[d, n], |i| inverse_softplus((i[1] + 1) as f64)),
        );
        store.insert(self.name("d_skip"), Tensor::ones(&[d]));
        store.insert(self.name("w_out"), fan_in_uniform(rng, &[d, o], d));
        store.insert(self.name("b_out"), Tensor::zeros(&[o]));
    }

    /// The state matrix `A = −softplus(a_raw)`, every entry negative.
    pub fn state_matrix(&self, tape: &mut Tape, params: &Bound) -> Result<Var> {
        let raw = params.get(&self.name("a_raw"))?;
        let sp = tape.softplus(raw);
        Ok(tape.neg(sp))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let (d, n) = (self.d_model, self.d_state);
        let shape = tape.shape(x).to_vec();
        let [b, t, di] = shape[..] else {
            return Err(Error::shape("stg_mamba", &shape, &[0, 0, self.d_in]));
        };
        if di != self.d_in {
            return Err(Error::shape("stg_mamba", &shape, &[b, t, self.d_in]));
        }
        let split = tape.matmul(x, params.get(&self.name("w_split"))?)?;
        let branch = tape.slice(split, 2, 0, d)?;
        let gate_in = tape.slice(split, 2, d, d)?;

        let conv = tape.conv1d(
            branch,
            params.get(&self.name("w_conv"))?,
            CONV_KERNEL - 1,
            0,
        )?;
        let conv = tape.add(conv, params.get(&self.name("b_conv"))?)?;
        let x_conv = tape.silu(conv);

        let proj = tape.matmul(x_conv, params.get(&self.name("w_proj"))?)?;
        let delta_raw = tape.slice(proj, 2, 0, d)?;
        let b_sel = tape.slice(proj, 2, d, n)?;
        let c_sel = tape.slice(proj, 2, d + n, n)?;

        let a = self.state_matrix(tape, params)?;
        let delta_bias = params.get(&self.name("delta_bias"))?;
        let (delta_a, delta_bu) = discretize(tape, delta_raw, delta_bias, a, b_sel, x_conv)?;
        let h = scan(tape, delta_a, delta_bu, self.epsilon)?;

        let c4 = tape.reshape(c_sel, &[b, t, 1, n])?;
        let read = tape.mul(h, c4)?;
        let read = tape.sum(read, 3)?;
        let skip = tape.mul(x_conv, params.get(&self.name("d_skip"))?)?;
        let o = tape.add(read, skip)?;

        let gate = tape.silu(gate_in);
        let fused = tape.mul(o, gate)?;
        let y = tape.matmul(fused, params.get(&self.name("w_out"))?)?;
        tape.add(y, params.get(&self.name("b_out"))?)
    }

    /// Forward pass on a throwaway tape.
    pub fn forward_values(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block() -> (StgMambaBlock, ParamStore) {
        let blk = StgMambaBlock::new(4, 3, 2, 5, "ssm");
        let mut store = ParamStore::new();
        blk.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        (blk, store)
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for x in [1e-3, 0.1, 1.0, 5.0] {
            let y = inverse_softplus(x);
            assert!((crate::autodiff::kernels::softplus(y) - x).abs() < 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn init_state_matrix_is_negative_ladder() {
        let (blk, store) = block();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let a = blk.state_matrix(&mut tape, &p).unwrap();
        let a = tape.value(a);
        for dd in 0..3 {
            for nn in 0..2 {
                assert!((a.at(&[dd, nn]) + (nn + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (blk, store) = block();
        let y = blk
            .forward_values(&store, &Tensor::zeros(&[2, 6, 4]))
            .unwrap();
        assert_eq!(y.shape(), &[2, 6, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn future_perturbation_does_not_leak() {
        let (blk, store) = block();
        let x = Tensor::from_fn(&[1, 8, 4], |i| ((i[1] * 4 + i[2]) as f64 * 0.3).cos());
        let mut x2 = x.clone();
        for c in 0..4 {
            x2.set(&[0, 5, c], x2.at(&[0, 5, c]) + 0.75);
        }
        let (y1, y2) = (
            blk.forward_values(&store, &x).unwrap(),
            blk.forward_values(&store, &x2).unwrap(),
        );
        for t in 0..5 {
            for c in 0..5 {
                assert_eq!(y1.at(&[0, t, c]).to_bits(), y2.at(&[0, t, c]).to_bits());
            }
        }
        assert!((0..5).any(|c| y1.at(&[0, 5, c]) != y2.at(&[0, 5, c])));
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let (blk, store) = block();
        assert!(matches!(
            blk.forward_values(&store, &Tensor::zeros(&[1, 3, 2])),
            Err(Error::Shape { .. })
        ));
    }
}
