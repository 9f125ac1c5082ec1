//! Skeleton graphs and the spatio-temporal graph propagation layers.
//!
//! The teacher layer learns a reweighting `f_base` of the anatomical
//! adjacency; the light student layer propagates over the fixed symmetric
//! normalization of it. Both build the block-tridiagonal spatio-temporal
//! matrix over all frames, propagate features through it, refine with a
//! temporal convolution and finish with an affine map.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, key, Bound, ParamStore};
use crate::tensor::Tensor;

/// Kernel width of the temporal convolution inside the graph layers.
pub const TEMPORAL_KERNEL: usize = 3;

fn default_true() -> bool {
    true
}

/// Joints and unordered bone edges of a skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub joints: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default = "default_true")]
    pub self_loops: bool,
}

impl SkeletonTopology {
    pub fn new(joints: usize, edges: Vec<[usize; 2]>) -> Result<Self> {
        let topo = Self {
            joints,
            edges,
            self_loops: true,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Path graph `0 - 1 - ... - (J-1)`.
    pub fn chain(joints: usize) -> Self {
        Self {
            joints,
            edges: (1..joints).map(|j| [j - 1, j]).collect(),
            self_loops: true,
        }
    }

    /// Lower-body tree for five joints (pelvis, left/right knee,
    /// left/right ankle); a chain for any other joint count.
    pub fn lower_body(joints: usize) -> Self {
        if joints == 5 {
            Self {
                joints,
                edges: vec![[0, 1], [0, 2], [1, 3], [2, 4]],
                self_loops: true,
            }
        } else {
            Self::chain(joints)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::Config("skeleton needs at least one joint".into()));
        }
        for e in &self.edges {
            if e[0] >= self.joints || e[1] >= self.joints {
                return Err(Error::Config(format!(
                    "edge {e:?} out of range for {} joints",
                    self.joints
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let topo: Self = serde_json::from_str(s)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Symmetric 0/1 matrix of bones, with ones on the diagonal when
    /// `self_loops` is set.
    pub fn static_adjacency(&self) -> Tensor {
        let j = self.joints;
        let mut a = Tensor::zeros(&[j, j]);
        for &[p, q] in &self.edges {
            a.set(&[p, q], 1.0);
            a.set(&[q, p], 1.0);
        }
        if self.self_loops {
            for i in 0..j {
                a.set(&[i, i], 1.0);
            }
        }
        a
    }

    /// `D^{-1/2} A D^{-1/2}`; an isolated joint keeps only itself.
    pub fn symmetric_normalized(&self) -> Tensor {
        let a = self.static_adjacency();
        let j = self.joints;
        let deg: Vec<f64> = (0..j)
            .map(|r| (0..j).map(|c| a.at(&[r, c])).sum())
            .collect();
        Tensor::from_fn(&[j, j], |i| {
            let (r, c) = (i[0], i[1]);
            if deg[r] == 0.0 {
                if r == c {
                    1.0
                } else {
                    0.0
                }
            } else if deg[c] == 0.0 {
                0.0
            } else {
                a.at(&[r, c]) / (deg[r].sqrt() * deg[c].sqrt())
            }
        })
    }

    /// Relabels joints so that new joint `k` is old joint `perm[k]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.joints {
            return Err(Error::shape("relabel", &[self.joints], &[perm.len()]));
        }
        let mut inv = vec![usize::MAX; self.joints];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.joints || inv[old] != usize::MAX {
                return Err(Error::contract("relabel needs a permutation"));
            }
            inv[old] = new;
        }
        Ok(Self {
            joints: self.joints,
            edges: self.edges.iter().map(|&[p, q]| [inv[p], inv[q]]).collect(),
            self_loops: self.self_loops,
        })
    }

    fn zero_rows(&self) -> Vec<usize> {
        let a = self.static_adjacency();
        (0..self.joints)
            .filter(|&r| (0..self.joints).all(|c| a.at(&[r, c]) == 0.0))
            .collect()
    }
}

/// `row_normalize(A_static ⊙ softplus(f_base))` recorded on `tape`.
///
/// A joint whose mask row is empty gets a unit self weight.
pub fn dynamic_adjacency(tape: &mut Tape, f_base: Var, topology: &SkeletonTopology) -> Result<Var> {
    let j = topology.joints;
    if tape.shape(f_base) != [j, j] {
        return Err(Error::shape(
            "dynamic_adjacency",
            tape.shape(f_base),
            &[j, j],
        ));
    }
    let mask = tape.constant(topology.static_adjacency());
    let weights = tape.softplus(f_base);
    let mut masked = tape.mul(mask, weights)?;
    let zero_rows = topology.zero_rows();
    if !zero_rows.is_empty() {
        let mut fallback = Tensor::zeros(&[j, j]);
        for r in zero_rows {
            fallback.set(&[r, r], 1.0);
        }
        let fallback = tape.constant(fallback);
        masked = tape.add(masked, fallback)?;
    }
    let rows = tape.sum(masked, 1)?;
    let rows = tape.reshape(rows, &[j, 1])?;
    tape.div(masked, rows)
}

/// Value-only [`dynamic_adjacency`].
pub fn build_dynamic_adjacency(f_base: &Tensor, topology: &SkeletonTopology) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(f_base.clone());
    let a = dynamic_adjacency(&mut tape, f, topology)?;
    Ok(tape.value(a).clone())
}

/// The `TJ × TJ` spatio-temporal adjacency over `frames` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdjacency {
    pub matrix: Tensor,
    pub frames: usize,
    pub joints: usize,
}

impl BlockAdjacency {
    /// The `J × J` block at block-row `r`, block-column `c`.
    pub fn block(&self, r: usize, c: usize) -> Tensor {
        let j = self.joints;
        Tensor::from_fn(&[j, j], |i| self.matrix.at(&[r * j + i[0], c * j + i[1]]))
    }
}

/// Diagonal blocks `a_tilde`, superdiagonal `a_t`, subdiagonal `a_tᵀ`.
pub fn build_block_adjacency(
    a_tilde: &Tensor,
    a_t: &Tensor,
    frames: usize,
) -> Result<BlockAdjacency> {
    let mut tape = Tape::new();
    let d = tape.constant(a_tilde.clone());
    let o = tape.constant(a_t.clone());
    let m = tape.block_tridiagonal(d, o, frames)?;
    Ok(BlockAdjacency {
        matrix: tape.value(m).clone(),
        frames,
        joints: a_tilde.shape()[0],
    })
}

/// Which spatial adjacency a [`GraphLayer`] propagates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    /// Learned `f_base` reweighting of the skeleton (teacher).
    Dynamic,
    /// Fixed symmetric normalization of the skeleton (student).
    Static,
}

/// Spatio-temporal graph layer mapping `[B, T, J, F]` to `[B, T, J, O]`.
///
/// Parameters: `f_base` (`Dynamic` only, `J×J`), `a_t` (`J×J`),
/// `tc_weight` (`F×F×3`), `tc_bias` (`F`), `w` (`F×O`), `b` (`O`).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayer {
    pub kind: GraphKind,
    pub topology: SkeletonTopology,
    pub in_features: usize,
    pub out_features: usize,
    pub prefix: String,
}

impl GraphLayer {
    pub fn new(
        kind: GraphKind,
        topology: SkeletonTopology,
        in_features: usize,
        out_features: usize,
        prefix: &str,
    ) -> Self {
        Self {
            kind,
            topology,
            in_features,
            out_features,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, n: &str) -> String {
        key(&self.prefix, n)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (j, f, o) = (self.topology.joints, self.in_features, self.out_features);
        let mut shapes = Vec::with_capacity(6);
        if self.kind == GraphKind::Dynamic {
            shapes.push((self.name("f_base"), vec![j, j]));
        }
        shapes.extend([
            (self.name("a_t"), vec![j, j]),
            (self.name("tc_weight"), vec![f, f, TEMPORAL_KERNEL]),
            (self.name("tc_bias"), vec![f]),
            (self.name("w"), vec![f, o]),
            (self.name("b"), vec![o]),
        ]);
        shapes
    }

    /// `f_base = 0` (plain row normalization), `a_t = I`, affine maps
    /// `U(±1/√fan_in)`, biases zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (j, f, o) = (self.topology.joints, self.in_features, self.out_features);
        if self.kind == GraphKind::Dynamic {
            store.insert(self.name("f_base"), Tensor::zeros(&[j, j]));
        }
        store.insert(self.name("a_t"), Tensor::eye(j));
        store.insert(
            self.name("tc_weight"),
            fan_in_uniform(rng, &[f, f, TEMPORAL_KERNEL], f * TEMPORAL_KERNEL),
        );
        store.insert(self.name("tc_bias"), Tensor::zeros(&[f]));
        store.insert(self.name("w"), fan_in_uniform(rng, &[f, o], f));
        store.insert(self.name("b"), Tensor::zeros(&[o]));
    }

    /// The per-frame spatial adjacency `Ã`.
    pub fn spatial_adjacency(&self, tape: &mut Tape, params: &Bound) -> Result<Var> {
        match self.kind {
            GraphKind::Dynamic => {
                let f_base = params.get(&self.name("f_base"))?;
                dynamic_adjacency(tape, f_base, &self.topology)
            }
            GraphKind::Static => Ok(tape.constant(self.topology.symmetric_normalized())),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let (j, f, o) = (self.topology.joints, self.in_features, self.out_features);
        let shape = tape.shape(x).to_vec();
        let [b, t, xj, xf] = shape[..] else {
            return Err(Error::shape("graph_layer", &shape, &[0, 0, j, f]));
        };
        if xj != j || xf != f {
            return Err(Error::shape("graph_layer", &shape, &[b, t, j, f]));
        }
        if !tape.value(x).is_finite() {
            return Err(Error::contract(
                "graph layer input contains non-finite values",
            ));
        }
        let a_tilde = self.spatial_adjacency(tape, params)?;
        let a_t = params.get(&self.name("a_t"))?;
        let a_hat = tape.block_tridiagonal(a_tilde, a_t, t)?;

        let flat = tape.reshape(x, &[b, t * j, f])?;
        let h = tape.matmul(a_hat, flat)?;

        // temporal convolution per joint: [B, T, J, F] -> [B·J, T, F]
        let h = tape.reshape(h, &[b, t, j, f])?;
        let h = tape.permute(h, &[0, 2, 1, 3])?;
        let h = tape.reshape(h, &[b * j, t, f])?;
        let pad = TEMPORAL_KERNEL / 2;
        let h = tape.conv1d(h, params.get(&self.name("tc_weight"))?, pad, pad)?;
        let h = tape.add(h, params.get(&self.name("tc_bias"))?)?;
        let h = tape.reshape(h, &[b, j, t, f])?;
        let h = tape.permute(h, &[0, 2, 1, 3])?;

        let z = tape.matmul(h, params.get(&self.name("w"))?)?;
        let z = tape.add(z, params.get(&self.name("b"))?)?;
        debug_assert_eq!(tape.shape(z), [b, t, j, o]);
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_dynamic_adjacency_on_two_joint_chain() {
        let topo = SkeletonTopology::chain(2);
        let a = build_dynamic_adjacency(&Tensor::zeros(&[2, 2]), &topo).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn structural_zero_survives_any_filter() {
        let topo = SkeletonTopology::chain(3);
        let f = Tensor::from_fn(&[3, 3], |i| 5.0 * i[0] as f64 - 3.0 * i[1] as f64);
        let a = build_dynamic_adjacency(&f, &topo).unwrap();
        assert_eq!(a.at(&[0, 2]), 0.0);
        assert_eq!(a.at(&[2, 0]), 0.0);
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| a.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_joint_without_self_loop_keeps_itself() {
        let topo = SkeletonTopology {
            joints: 3,
            edges: vec![[0, 1]],
            self_loops: false,
        };
        let a = build_dynamic_adjacency(&Tensor::zeros(&[3, 3]), &topo).unwrap();
        assert_eq!(a.at(&[2, 2]), 1.0);
        assert_eq!(a.at(&[2, 0]), 0.0);
    }

    #[test]
    fn dynamic_adjacency_rejects_wrong_filter_shape() {
        let topo = SkeletonTopology::chain(3);
        assert!(matches!(
            build_dynamic_adjacency(&Tensor::zeros(&[2, 2]), &topo),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn single_frame_block_adjacency_is_spatial() {
        let a = Tensor::from_fn(&[2, 2], |i| 1.0 + i[0] as f64 + 2.0 * i[1] as f64);
        let b = build_block_adjacency(&a, &Tensor::eye(2), 1).unwrap();
        assert!(b.matrix.bit_eq(&a));
        assert!(build_block_adjacency(&a, &Tensor::eye(2), 0).is_err());
    }

    #[test]
    fn topology_json_round_trip_and_validation() {
        let t =
            SkeletonTopology::from_json_str(r#"{"joints": 3, "edges": [[0,1],[1,2]]}"#).unwrap();
        assert!(t.self_loops);
        assert_eq!(t, SkeletonTopology::chain(3));
        assert!(SkeletonTopology::from_json_str(r#"{"joints": 2, "edges": [[0,2]]}"#).is_err());
    }

    fn layer(kind: GraphKind) -> (GraphLayer, ParamStore) {
        let l = GraphLayer::new(kind, SkeletonTopology::lower_body(5), 3, 4, "graph");
        let mut store = ParamStore::new();
        l.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (l, store)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for kind in [GraphKind::Dynamic, GraphKind::Static] {
            let (l, store) = layer(kind);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros(&[2, 6, 5, 3]));
            let z = l.forward(&mut tape, &p, x).unwrap();
            assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shape_contract() {
        let l = GraphLayer::new(GraphKind::Dynamic, SkeletonTopology::chain(5), 3, 4, "g");
        let mut store = ParamStore::new();
        l.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[2, 8, 5, 3], 0.1));
        let z = l.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(z), &[2, 8, 5, 4]);
    }

    #[test]
    fn static_layer_has_fewer_parameters() {
        let (_, dynamic) = layer(GraphKind::Dynamic);
        let (_, fixed) = layer(GraphKind::Static);
        assert_eq!(dynamic.scalar_count() - fixed.scalar_count(), 25);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let (l, store) = layer(GraphKind::Static);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let mut bad = Tensor::zeros(&[1, 2, 5, 3]);
        bad.data_mut()[4] = f64::NAN;
        let x = tape.constant(bad);
        assert!(matches!(
            l.forward(&mut tape, &p, x),
            Err(Error::Contract(_))
        ));
    }
}
