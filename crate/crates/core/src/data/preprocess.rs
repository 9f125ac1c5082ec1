//! Vertical-scale augmentation and per-feature standardization.

use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, Source, COORDS, Z_AXIS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 3% height increase.
pub const DEFAULT_VERTICAL_SCALE: f64 = 1.03;

/// Lower bound on a fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Multiplies every z-coordinate by `s`; x and y are untouched.
pub fn augment_vertical_scale(seq: &SkeletonSequence, s: f64) -> Result<SkeletonSequence> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::contract(format!(
            "vertical scale must be positive and finite, got {s}"
        )));
    }
    let mut frames = seq.frames.clone();
    for xyz in frames.data_mut().chunks_mut(COORDS) {
        xyz[Z_AXIS] *= s;
    }
    Ok(SkeletonSequence {
        source: Source::Augmented,
        origin: Some(seq.base_id().to_string()),
        frames,
        ..seq.clone()
    })
}

/// The originals followed by one scaled copy of each, ids suffixed `#aug`.
pub fn augment_dataset(dataset: &[SkeletonSequence], s: f64) -> Result<Vec<SkeletonSequence>> {
    if s == 1.0 {
        return Err(Error::contract("augmentation scale must differ from 1"));
    }
    if let Some(a) = dataset.iter().find(|q| q.source == Source::Augmented) {
        return Err(Error::contract(format!(
            "sequence `{}` is already augmented; augmentation is applied once",
            a.id
        )));
    }
    let mut out = dataset.to_vec();
    for seq in dataset {
        let mut copy = augment_vertical_scale(seq, s)?;
        copy.id = format!("{}#aug", seq.id);
        out.push(copy);
    }
    Ok(out)
}

/// Per-(joint, coordinate) mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// `[N, 3]`
    pub mean: Tensor,
    /// `[N, 3]`, every entry at least [`STD_FLOOR`].
    pub std: Tensor,
}

impl NormStats {
    /// Fits on every frame of `train`.
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a SkeletonSequence>) -> Result<Self> {
        let train: Vec<&SkeletonSequence> = train.into_iter().collect();
        let first = train.first().ok_or_else(|| {
            Error::contract("cannot fit normalization on an empty training split")
        })?;
        let feats = first.joint_count() * COORDS;
        let mut count = 0usize;
        let mut sum = vec![0.0; feats];
        for s in &train {
            if s.joint_count() * COORDS != feats {
                return Err(Error::shape(
                    "standardize",
                    first.frames.shape(),
                    s.frames.shape(),
                ));
            }
            for row in s.frames.data().chunks(feats) {
                sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; feats];
        for s in &train {
            for row in s.frames.data().chunks(feats) {
                for ((a, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *a += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .enumerate()
            .map(|(f, s)| {
                let sd = (s / count as f64).sqrt();
                if sd < STD_FLOOR {
                    log::warn!(
                        "feature (joint {}, coordinate {}) is constant on the training split; std floored at {STD_FLOOR}",
                        f / COORDS,
                        f % COORDS
                    );
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        let shape = vec![feats / COORDS, COORDS];
        Ok(Self {
            mean: Tensor::new(shape.clone(), mean)?,
            std: Tensor::new(shape, std)?,
        })
    }

    fn check(&self, seq: &SkeletonSequence) -> Result<()> {
        if seq.joint_count() * COORDS != self.mean.numel() {
            return Err(Error::shape(
                "standardize",
                seq.frames.shape(),
                self.mean.shape(),
            ));
        }
        Ok(())
    }

    /// `z = (x − μ) / σ`
    pub fn apply(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        self.check(seq)?;
        let (mu, sd) = (self.mean.data(), self.std.data());
        let mut frames = seq.frames.clone();
        for row in frames.data_mut().chunks_mut(mu.len()) {
            for ((v, m), s) in row.iter_mut().zip(mu).zip(sd) {
                *v = (*v - m) / s;
            }
        }
        Ok(SkeletonSequence {
            frames,
            ..seq.clone()
        })
    }

    /// `x = z·σ + μ`
    pub fn invert(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        self.check(seq)?;
        let (mu, sd) = (self.mean.data(), self.std.data());
        let mut frames = seq.frames.clone();
        for row in frames.data_mut().chunks_mut(mu.len()) {
            for ((v, m), s) in row.iter_mut().zip(mu).zip(sd) {
                *v = *v * s + m;
            }
        }
        Ok(SkeletonSequence {
            frames,
            ..seq.clone()
        })
    }
}

/// Fits on the sequences at `train` and applies the statistics to all.
pub fn standardize(
    dataset: &[SkeletonSequence],
    train: &[usize],
) -> Result<(Vec<SkeletonSequence>, NormStats)> {
    let stats = NormStats::fit(train.iter().map(|&i| &dataset[i]))?;
    let out = dataset
        .iter()
        .map(|s| stats.apply(s))
        .collect::<Result<_>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, f: impl Fn(&[usize]) -> f64) -> SkeletonSequence {
        SkeletonSequence::new(id, 0, id, Source::Ingested, Tensor::from_fn(&[5, 2, 3], f)).unwrap()
    }

    #[test]
    fn only_z_is_scaled() {
        let s = seq("a", |i| (i[0] * 6 + i[1] * 3 + i[2]) as f64 + 0.1);
        let a = augment_vertical_scale(&s, 1.03).unwrap();
        for (x, y) in s.frames.data().chunks(3).zip(a.frames.data().chunks(3)) {
            assert_eq!(x[0].to_bits(), y[0].to_bits());
            assert_eq!(x[1].to_bits(), y[1].to_bits());
            assert_eq!(y[2], x[2] * 1.03);
        }
        assert_eq!(a.source, Source::Augmented);
        assert_eq!(a.origin.as_deref(), Some("a"));
    }

    #[test]
    fn unit_scale_is_identity_and_inverse_recovers() {
        let s = seq("a", |i| (i[0] as f64).sin() + i[2] as f64);
        assert_eq!(augment_vertical_scale(&s, 1.0).unwrap().frames, s.frames);
        let back =
            augment_vertical_scale(&augment_vertical_scale(&s, 1.03).unwrap(), 1.0 / 1.03).unwrap();
        assert!(back.frames.max_abs_diff(&s.frames) < 1e-12);
        assert!(augment_vertical_scale(&s, 0.0).is_err());
    }

    #[test]
    fn dataset_doubles_once() {
        let d = vec![seq("a", |_| 1.0), seq("b", |_| 2.0)];
        let aug = augment_dataset(&d, 1.03).unwrap();
        assert_eq!(aug.len(), 4);
        assert_eq!(aug[2].id, "a#aug");
        assert!(augment_dataset(&aug, 1.03).is_err());
        assert!(augment_dataset(&d, 1.0).is_err());
    }

    #[test]
    fn constant_feature_is_floored_and_zeroed() {
        let d = vec![
            seq("a", |i| i[0] as f64 * i[2] as f64),
            seq("b", |i| i[0] as f64 * i[2] as f64 + 1.0),
        ];
        let (out, stats) = standardize(&d, &[0, 1]).unwrap();
        assert_eq!(stats.std.at(&[0, 0]), 0.5);
        let constant = NormStats::fit([&d[0]]).unwrap();
        assert_eq!(constant.std.at(&[0, 0]), STD_FLOOR);
        let z = constant.apply(&d[0]).unwrap();
        assert!(z.frames.data().chunks(3).all(|c| c[0] == 0.0));
        assert_eq!(out.len(), 2);
    }
}
