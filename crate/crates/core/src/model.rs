//! Teacher and student networks and their checkpoints.
//!
//! Both networks run a graph layer over `[B, T, J, C]`, flatten joints into
//! `D = J·O` channels, pass residual state-space blocks and map every step
//! back to per-joint class logits. The teacher uses the dynamic graph layer
//! and two blocks; the student uses the static layer and one.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphKind, GraphLayer, SkeletonTopology};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::ssm::StgMambaBlock;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topology: SkeletonTopology,
    pub in_features: usize,
    pub graph_out: usize,
    pub ssm_channels: usize,
    pub state_dim: usize,
    pub num_classes: usize,
    pub blocks: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Temporal windows pooled into region embeddings.
    #[serde(default = "default_regions")]
    pub regions: usize,
}

fn default_regions() -> usize {
    4
}

impl ModelConfig {
    /// Dynamic graph layer and two blocks, `O = 8`, `N = 8`.
    pub fn teacher(
        topology: SkeletonTopology,
        in_features: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let graph_out = 8;
        Self {
            ssm_channels: topology.joints * graph_out,
            topology,
            in_features,
            graph_out,
            state_dim: 8,
            num_classes,
            blocks: 2,
            variant: Variant::Teacher,
            seed,
            regions: default_regions(),
        }
    }

    /// Same widths as [`teacher`](Self::teacher) with the static layer and one block.
    pub fn student(
        topology: SkeletonTopology,
        in_features: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            blocks: 1,
            variant: Variant::Student,
            ..Self::teacher(topology, in_features, num_classes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let j = self.topology.joints;
        if self.ssm_channels != j * self.graph_out {
            return Err(Error::Config(format!(
                "ssm_channels must equal joints × graph_out = {}, got {}",
                j * self.graph_out,
                self.ssm_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.in_features == 0 || self.graph_out == 0 || self.state_dim == 0 || self.regions == 0
        {
            return Err(Error::Config(
                "model widths and region count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn graph_kind(&self) -> GraphKind {
        match self.variant {
            Variant::Teacher => GraphKind::Dynamic,
            Variant::Student => GraphKind::Static,
        }
    }
}

/// Forward results as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    /// `[B, T, J, K]`
    pub joint_logits: Var,
    /// `[B, K]`, the mean of `joint_logits` over time and joints.
    pub seq_logits: Var,
    /// `[B, J, O]`, graph features pooled over time.
    pub joint_embeddings: Var,
    /// `[B, G, O]`, graph features pooled over joints and temporal windows.
    pub region_embeddings: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub joint_logits: Tensor,
    pub seq_logits: Tensor,
    pub joint_embeddings: Tensor,
    pub region_embeddings: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    graph: GraphLayer,
    blocks: Vec<StgMambaBlock>,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        model.graph.init(&mut model.params, &mut rng);
        for block in &model.blocks {
            block.init(&mut model.params, &mut rng);
        }
        let (d, jk) = (model.config.ssm_channels, model.head_width());
        model
            .params
            .insert("head.w", fan_in_uniform(&mut rng, &[d, jk], d));
        model.params.insert("head.b", Tensor::zeros(&[jk]));
        Ok(model)
    }

    /// Layers without parameters.
    fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let graph = GraphLayer::new(
            config.graph_kind(),
            config.topology.clone(),
            config.in_features,
            config.graph_out,
            "graph",
        );
        let d = config.ssm_channels;
        let blocks = (0..config.blocks)
            .map(|i| StgMambaBlock::new(d, d, config.state_dim, d, &format!("block{i}")))
            .collect();
        Ok(Self {
            config,
            params: ParamStore::new(),
            graph,
            blocks,
        })
    }

    fn head_width(&self) -> usize {
        self.config.topology.joints * self.config.num_classes
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = self.graph.param_shapes();
        for b in &self.blocks {
            shapes.extend(b.param_shapes());
        }
        let (d, jk) = (self.config.ssm_channels, self.head_width());
        shapes.push(("head.w".into(), vec![d, jk]));
        shapes.push(("head.b".into(), vec![jk]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn graph_layer(&self) -> &GraphLayer {
        &self.graph
    }

    pub fn blocks(&self) -> &[StgMambaBlock] {
        &self.blocks
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        self.params.bind(tape, requires_grad)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<ModelVars> {
        let cfg = &self.config;
        let (j, o, k, g) = (
            cfg.topology.joints,
            cfg.graph_out,
            cfg.num_classes,
            cfg.regions,
        );
        let shape = tape.shape(x).to_vec();
        let [b, t, xj, xc] = shape[..] else {
            return Err(Error::shape("model", &shape, &[0, 0, j, cfg.in_features]));
        };
        if xj != j || xc != cfg.in_features {
            return Err(Error::shape("model", &shape, &[b, t, j, cfg.in_features]));
        }
        if t == 0 || t % g != 0 {
            return Err(Error::contract(format!(
                "frame count {t} must be a positive multiple of {g} regions"
            )));
        }
        let h = self.graph.forward(tape, params, x)?;
        let joint_embeddings = tape.mean(h, 1)?;
        let per_frame = tape.mean(h, 2)?;
        let windows = tape.reshape(per_frame, &[b, g, t / g, o])?;
        let region_embeddings = tape.mean(windows, 2)?;

        let mut z = tape.reshape(h, &[b, t, j * o])?;
        for block in &self.blocks {
            let y = block.forward(tape, params, z)?;
            z = tape.add(z, y)?;
        }
        let logits = tape.matmul(z, params.get("head.w")?)?;
        let logits = tape.add(logits, params.get("head.b")?)?;
        let joint_logits = tape.reshape(logits, &[b, t, j, k])?;
        let over_time = tape.mean(joint_logits, 1)?;
        let seq_logits = tape.mean(over_time, 1)?;
        Ok(ModelVars {
            joint_logits,
            seq_logits,
            joint_embeddings,
            region_embeddings,
        })
    }

    /// Forward pass on a throwaway tape, no gradients.
    pub fn forward_values(&self, x: &Tensor) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(ModelOutput {
            joint_logits: tape.value(out.joint_logits).clone(),
            seq_logits: tape.value(out.seq_logits).clone(),
            joint_embeddings: tape.value(out.joint_embeddings).clone(),
            region_embeddings: tape.value(out.region_embeddings).clone(),
        })
    }

    /// Primitive operations recorded by one forward pass on `x`.
    pub fn forward_op_count(&self, x: &Tensor) -> Result<usize> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        self.forward(&mut tape, &bound, xv)?;
        Ok(tape.op_count())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model, checking every parameter name and shape.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let mut model = Self::skeleton(ckpt.config)?;
        let shapes = model.param_shapes();
        if shapes.len() != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                shapes.len()
            )));
        }
        for (name, shape) in shapes {
            let t = ckpt.params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("checkpoint", t.shape(), &shape));
            }
        }
        model.params = ckpt.params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(ckpt)
    }
}

/// `{"format_version": 1, "config": {...}, "params": {name: {"shape", "data"}}}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher() -> Model {
        Model::init(ModelConfig::teacher(
            SkeletonTopology::lower_body(5),
            3,
            2,
            0,
        ))
        .unwrap()
    }

    fn student() -> Model {
        Model::init(ModelConfig::student(
            SkeletonTopology::lower_body(5),
            3,
            2,
            0,
        ))
        .unwrap()
    }

    #[test]
    fn default_parameter_counts() {
        assert_eq!(teacher().param_count(), 15802);
        assert_eq!(student().param_count(), 8137);
    }

    #[test]
    fn shape_list_matches_store() {
        for m in [teacher(), student()] {
            let sum: usize = m
                .param_shapes()
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            assert_eq!(sum, m.param_count());
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut cfg = ModelConfig::teacher(SkeletonTopology::lower_body(5), 3, 2, 0);
        cfg.ssm_channels = 39;
        assert!(matches!(Model::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes() {
        let x = Tensor::from_fn(&[2, 16, 5, 3], |i| (i[1] as f64 * 0.2 + i[2] as f64).sin());
        let out = teacher().forward_values(&x).unwrap();
        assert_eq!(out.joint_logits.shape(), &[2, 16, 5, 2]);
        assert_eq!(out.seq_logits.shape(), &[2, 2]);
        assert_eq!(out.joint_embeddings.shape(), &[2, 5, 8]);
        assert_eq!(out.region_embeddings.shape(), &[2, 4, 8]);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = teacher();
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = Model::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert!(back.params.bit_eq(&m.params));
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn frames_must_divide_into_regions() {
        let x = Tensor::zeros(&[1, 6, 5, 3]);
        assert!(matches!(
            student().forward_values(&x),
            Err(Error::Contract(_))
        ));
    }
}
