//! Synthetic lower-body gait.
//!
//! Every joint swings sinusoidally around a fixed standing pose with a
//! random per-sample phase, so class-conditional mean trajectories coincide.
//! Classes differ in three documented ways, interpolated linearly in
//! `r = class / (K − 1)`:
//!
//! | property                         | `r = 0` | `r = 1` |
//! |----------------------------------|---------|---------|
//! | gait cycles per sequence         | 2.0     | 3.5     |
//! | right/left swing amplitude ratio | 1.0     | 0.5     |
//! | coordinate noise (std)           | 0.02    | 0.08    |
//!
//! Joint 0 is the pelvis; odd joints are left-side, even joints right-side,
//! with swing amplitude growing toward the ankles.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, Source, COORDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CYCLES: (f64, f64) = (2.0, 3.5);
pub const ASYMMETRY: (f64, f64) = (1.0, 0.5);
pub const NOISE: (f64, f64) = (0.02, 0.08);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub joints: usize,
    pub seed: u64,
    /// Frame count must divide evenly into this many windows.
    #[serde(default = "default_regions")]
    pub regions: usize,
}

fn default_regions() -> usize {
    4
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            per_class: 20,
            frames: 32,
            joints: 5,
            seed: 0,
            regions: default_regions(),
        }
    }
}

fn lerp((a, b): (f64, f64), r: f64) -> f64 {
    a + (b - a) * r
}

/// Sample `i` of class `c` is `synth-c{c}-{i}` with subject `subject-c{c}-{i}`;
/// classes are emitted in order.
pub fn synth_gait(spec: &SynthSpec) -> Result<Vec<SkeletonSequence>> {
    if spec.classes < 2
        || spec.per_class == 0
        || spec.frames == 0
        || spec.joints == 0
        || spec.regions == 0
    {
        return Err(Error::Config(
            "synthetic spec needs ≥ 2 classes and positive counts".into(),
        ));
    }
    if spec.frames % spec.regions != 0 {
        return Err(Error::Config(format!(
            "frame count {} must be divisible by {} regions",
            spec.frames, spec.regions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t_len, j_len) = (spec.frames, spec.joints);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let r = c as f64 / (spec.classes - 1) as f64;
        let noise = Normal::new(0.0, lerp(NOISE, r)).map_err(|e| Error::Config(e.to_string()))?;
        for i in 0..spec.per_class {
            let cycles = lerp(CYCLES, r) + rng.random_range(-0.1..=0.1);
            let phase0 = rng.random_range(0.0..TAU);
            let gain = rng.random_range(0.9..=1.1);
            let offsets: Vec<f64> = (0..j_len * COORDS)
                .map(|_| rng.random_range(-0.01..=0.01))
                .collect();
            let mut data = Vec::with_capacity(t_len * j_len * COORDS);
            for t in 0..t_len {
                let phi = TAU * cycles * t as f64 / t_len as f64 + phase0;
                for j in 0..j_len {
                    let level = j.div_ceil(2) as f64;
                    let left = j % 2 == 1;
                    let side = if j == 0 {
                        0.0
                    } else if left {
                        -1.0
                    } else {
                        1.0
                    };
                    let amp = if left || j == 0 {
                        1.0
                    } else {
                        lerp(ASYMMETRY, r)
                    };
                    let swing = 0.15 * level * amp * gain;
                    let p = phi + if left { 0.0 } else { PI } + 0.3 * level;
                    let pose = [0.1 * side, 0.0, 1.0 - 0.45 * level];
                    let motion = if j == 0 {
                        [0.0, 0.0, 0.02 * gain * (2.0 * phi).sin()]
                    } else {
                        [
                            0.1 * swing * p.sin(),
                            swing * p.sin(),
                            0.3 * swing * p.cos(),
                        ]
                    };
                    for k in 0..COORDS {
                        let off = offsets[j * COORDS + k];
                        data.push(pose[k] + off + motion[k] + noise.sample(&mut rng));
                    }
                }
            }
            out.push(SkeletonSequence {
                id: format!("synth-c{c}-{i}"),
                label: c,
                subject: format!("subject-c{c}-{i}"),
                source: Source::Synthetic,
                origin: None,
                frames: Tensor::new(vec![t_len, j_len, COORDS], data)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_and_determinism() {
        let a = synth_gait(&SynthSpec::default()).unwrap();
        assert_eq!(a.len(), 40);
        assert!(a.iter().all(|s| s.frames.shape() == [32, 5, 3]));
        let b = synth_gait(&SynthSpec::default()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.frames.bit_eq(&y.frames)));
    }

    #[test]
    fn frames_must_divide_into_regions() {
        let spec = SynthSpec {
            frames: 30,
            ..Default::default()
        };
        assert!(matches!(synth_gait(&spec), Err(Error::Config(_))));
    }
}
