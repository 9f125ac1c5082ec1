//! Skeleton sequences: ingestion, augmentation, standardization, folds and
//! a synthetic gait generator.

mod folds;
mod io;
mod preprocess;
mod synth;

pub use folds::{make_folds, FoldPlan};
pub use io::{load_sequences, parse_sequences, write_sequences};
pub use preprocess::{
    augment_dataset, augment_vertical_scale, standardize, NormStats, DEFAULT_VERTICAL_SCALE,
    STD_FLOOR,
};
pub use synth::{synth_gait, SynthSpec, ASYMMETRY, CYCLES, NOISE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates per joint: x, y, z.
pub const COORDS: usize = 3;

/// Index of the vertical coordinate.
pub const Z_AXIS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ingested,
    Synthetic,
    Augmented,
}

/// One recorded walk: `frames` is `[T, N, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub label: usize,
    pub subject: String,
    pub source: Source,
    /// Id of the sequence an augmented copy was made from.
    pub origin: Option<String>,
    pub frames: Tensor,
}

impl SkeletonSequence {
    pub fn new(
        id: impl Into<String>,
        label: usize,
        subject: impl Into<String>,
        source: Source,
        frames: Tensor,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            label,
            subject: subject.into(),
            source,
            origin: None,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] != COORDS {
            return Err(Error::Data(format!(
                "sequence `{}` must have shape [T>=1, N>=1, 3], got {s:?}",
                self.id
            )));
        }
        if let Some(i) = self.frames.data().iter().position(|v| !v.is_finite()) {
            let (t, j) = (i / (s[1] * COORDS), (i / COORDS) % s[1]);
            return Err(Error::Data(format!(
                "sequence `{}` has a non-finite coordinate at frame {t}, joint {j}",
                self.id
            )));
        }
        Ok(())
    }

    /// The base sequence id: `origin` for augmented copies, else `id`.
    pub fn base_id(&self) -> &str {
        self.origin.as_deref().unwrap_or(&self.id)
    }

    /// Center-crops or pads with the edge frames to exactly `frames` frames.
    pub fn fit_length(&self, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::contract("target frame count must be positive"));
        }
        let (t, n) = (self.frame_count(), self.joint_count());
        let row = n * COORDS;
        let src = self.frames.data();
        let mut data = Vec::with_capacity(frames * row);
        if t >= frames {
            let start = (t - frames) / 2;
            data.extend_from_slice(&src[start * row..(start + frames) * row]);
        } else {
            let before = (frames - t) / 2;
            let after = frames - t - before;
            for _ in 0..before {
                data.extend_from_slice(&src[..row]);
            }
            data.extend_from_slice(src);
            for _ in 0..after {
                data.extend_from_slice(&src[(t - 1) * row..]);
            }
        }
        Ok(Self {
            frames: Tensor::new(vec![frames, n, COORDS], data)?,
            ..self.clone()
        })
    }
}

/// Stacks sequences of equal shape into `([B, T, N, 3], labels)`.
pub fn batch<'a>(
    seqs: impl IntoIterator<Item = &'a SkeletonSequence>,
) -> Result<(Tensor, Vec<usize>)> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in seqs {
        match &shape {
            None => shape = Some(s.frames.shape().to_vec()),
            Some(sh) if sh.as_slice() != s.frames.shape() => {
                return Err(Error::shape("batch", sh, s.frames.shape()));
            }
            Some(_) => {}
        }
        data.extend_from_slice(s.frames.data());
        labels.push(s.label);
    }
    let Some(sh) = shape else {
        return Err(Error::contract("cannot batch zero sequences"));
    };
    let mut full = vec![labels.len()];
    full.extend(sh);
    Ok((Tensor::new(full, data)?, labels))
}

/// Number of classes implied by the labels: `max + 1`.
pub fn class_count(dataset: &[SkeletonSequence]) -> usize {
    dataset.iter().map(|s| s.label + 1).max().unwrap_or(0)
}
