use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, SkeletonSequence, SynthSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::graph::SkeletonTopology;
use crate::model::ModelConfig;

/// Batch size of the short profile. At 32 a desk-scale training split
/// yields two optimizer steps per epoch.
pub const CI_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 200 teacher and 100 student epochs.
    #[default]
    Paper,
    /// 30 teacher and 15 student epochs with batches of [`CI_BATCH_SIZE`].
    Ci,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthSpec),
    /// JSON-lines file; sequences are center-cropped or edge-padded to `frames`.
    File {
        path: PathBuf,
        frames: usize,
    },
}

/// Adam with coupled weight decay (`g ← g + wd·θ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 1e-4,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Widths shared by teacher and student; `D = J·graph_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub graph_out: usize,
    pub state_dim: usize,
    pub regions: usize,
    /// Defaults to the lower-body tree (five joints) or a chain.
    pub topology: Option<SkeletonTopology>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            graph_out: 8,
            state_dim: 8,
            regions: 4,
            topology: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    /// Vertical scale of the single augmented copy; `None` disables augmentation.
    pub augment_scale: Option<f64>,
    pub model: ModelSpec,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (epochs_teacher, epochs_student, batch_size) = match profile {
            Profile::Paper => (200, 100, OptimConfig::default().batch_size),
            Profile::Ci => (30, 15, CI_BATCH_SIZE),
        };
        Self {
            data: DataSource::Synth(SynthSpec::default()),
            augment_scale: Some(data::DEFAULT_VERTICAL_SCALE),
            model: ModelSpec::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig {
                batch_size,
                ..Default::default()
            },
            epochs_teacher,
            epochs_student,
            folds: 5,
            seed: 0,
        }
    }

    /// A profile with the fields present in `overrides` replaced,
    /// recursively through nested objects.
    pub fn from_json_over(profile: Profile, overrides: &str) -> Result<Self> {
        let mut base = serde_json::to_value(Self::profile(profile))?;
        let patch: Value = serde_json::from_str(overrides)?;
        merge(&mut base, patch);
        let cfg: Self =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_over(profile, &std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || !(o.weight_decay >= 0.0) || o.batch_size == 0 {
            return Err(Error::Config(
                "learning rate and batch size must be positive, weight decay nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if let Some(s) = self.augment_scale {
            if !(s > 0.0) || s == 1.0 {
                return Err(Error::Config(format!(
                    "augment_scale must be positive and differ from 1, got {s}"
                )));
            }
        }
        self.distill.validate()
    }

    /// Loads or generates sequences, fixes their length and augments them.
    pub fn dataset(&self) -> Result<Vec<SkeletonSequence>> {
        let base = match &self.data {
            DataSource::Synth(spec) => data::synth_gait(spec)?,
            DataSource::File { path, frames } => data::load_sequences(path)?
                .iter()
                .map(|s| s.fit_length(*frames))
                .collect::<Result<_>>()?,
        };
        if base.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        match self.augment_scale {
            Some(s) => data::augment_dataset(&base, s),
            None => Ok(base),
        }
    }

    /// Teacher or student configuration for `dataset`, initialized from `seed`.
    pub fn model_config(
        &self,
        dataset: &[SkeletonSequence],
        student: bool,
        seed: u64,
    ) -> Result<ModelConfig> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let joints = first.joint_count();
        let topology = match &self.model.topology {
            Some(t) if t.joints != joints => {
                return Err(Error::Config(format!(
                    "topology has {} joints, data has {joints}",
                    t.joints
                )))
            }
            Some(t) => t.clone(),
            None => SkeletonTopology::lower_body(joints),
        };
        let classes = data::class_count(dataset).max(2);
        let mut cfg = if student {
            ModelConfig::student(topology, data::COORDS, classes, seed)
        } else {
            ModelConfig::teacher(topology, data::COORDS, classes, seed)
        };
        cfg.graph_out = self.model.graph_out;
        cfg.ssm_channels = joints * self.model.graph_out;
        cfg.state_dim = self.model.state_dim;
        cfg.regions = self.model.regions;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && !tagged_change(slot, &v) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Replacing a tagged enum with a different variant must not keep stale fields.
fn tagged_change(base: &Value, patch: &Value) -> bool {
    matches!((base.get("kind"), patch.get("kind")), (Some(a), Some(b)) if a != b)
}

/// `splitmix64` of `seed` offset by `stream`; independent per-purpose seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_values() {
        let c = RunConfig::default();
        assert_eq!(c.optim.learning_rate, 0.001);
        assert_eq!(c.optim.weight_decay, 1e-4);
        assert_eq!(c.optim.batch_size, 32);
        assert_eq!((c.epochs_teacher, c.epochs_student, c.folds), (200, 100, 5));
        let ci = RunConfig::profile(Profile::Ci);
        assert_eq!((ci.epochs_teacher, ci.epochs_student), (30, 15));
        assert_eq!(ci.optim.batch_size, CI_BATCH_SIZE);
    }

    #[test]
    fn partial_override_keeps_other_fields() {
        let c =
            RunConfig::from_json_over(Profile::Ci, r#"{"seed": 7, "optim": {"batch_size": 16}}"#)
                .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.optim.batch_size, 16);
        assert_eq!(c.optim.weight_decay, 1e-4);
        assert_eq!(c.optim.learning_rate, 0.001);
        assert_eq!(c.epochs_teacher, 30);
        let f = RunConfig::from_json_over(
            Profile::Ci,
            r#"{"data": {"kind": "file", "path": "x.jsonl", "frames": 16}}"#,
        )
        .unwrap();
        assert!(matches!(f.data, DataSource::File { frames: 16, .. }));
    }

    #[test]
    fn invalid_override_is_config_error() {
        assert!(matches!(
            RunConfig::from_json_over(Profile::Paper, r#"{"folds": 1}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json_over(Profile::Paper, r#"{"optim": {"learning_rate": "fast"}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_eq!(derive_seed(5, 2), derive_seed(5, 2));
    }
}
