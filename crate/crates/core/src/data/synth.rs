use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};

/// Parameters of the synthetic activity generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub sequences_per_class: usize,
    pub frames: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
    /// Centroid displacement per frame.
    pub drift_speed: f64,
    /// Spin about the vertical axis per frame, scaled by the class index
    /// offset from the middle class.
    pub spin_step: f64,
    /// Blob standard deviations along x, y, z before rotation.
    pub spread: [f64; 3],
    pub frame_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            sequences_per_class: 80,
            frames: 70,
            points: 32,
            noise: 0.05,
            seed: 7,
            drift_speed: 0.2,
            spin_step: 0.15,
            spread: [0.12, 0.05, 0.08],
            frame_rate: 30.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "must be at least 2"));
        }
        for (field, v) in [("sequences_per_class", self.sequences_per_class), ("frames", self.frames), ("points", self.points)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be a non-negative number"));
        }
        if self.spread.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("spread", "must be non-negative numbers"));
        }
        Ok(())
    }

    /// Per-frame centroid displacement of class `g`.
    pub fn drift(&self, g: usize) -> [f64; 3] {
        let theta = 2.0 * PI * g as f64 / self.classes as f64;
        [self.drift_speed * theta.cos(), self.drift_speed * theta.sin(), 0.0]
    }

    /// Rotation per frame about the vertical axis for class `g`.
    pub fn spin(&self, g: usize) -> f64 {
        self.spin_step * (g as f64 - (self.classes as f64 - 1.0) / 2.0)
    }
}

/// Generates `classes * sequences_per_class` labelled sequences, class-major.
///
/// Each sequence is a Gaussian blob (zero-mean offsets, fixed per sequence)
/// whose centroid moves by the class drift every frame while the blob spins
/// at the class rate, with a random start position and phase and isotropic
/// per-point noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<FrameSequence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(spec.classes * spec.sequences_per_class);
    for g in 0..spec.classes {
        let drift = spec.drift(g);
        let spin = spec.spin(g);
        for s in 0..spec.sequences_per_class {
            let start = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0];
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut offsets: Vec<[f64; 3]> = (0..spec.points)
                .map(|_| std::array::from_fn(|c| spec.spread[c] * unit.sample(&mut rng)))
                .collect();
            for c in 0..3 {
                let mean = offsets.iter().map(|o| o[c]).sum::<f64>() / spec.points as f64;
                offsets.iter_mut().for_each(|o| o[c] -= mean);
            }
            let frames = (0..spec.frames)
                .map(|f| {
                    let (sin, cos) = (phase + spin * f as f64).sin_cos();
                    let centre: [f64; 3] = std::array::from_fn(|c| start[c] + drift[c] * f as f64);
                    offsets
                        .iter()
                        .flat_map(|o| {
                            let rotated = [cos * o[0] - sin * o[1], sin * o[0] + cos * o[1], o[2]];
                            std::array::from_fn::<f64, 3, _>(|c| centre[c] + rotated[c])
                        })
                        .map(|v| if spec.noise > 0.0 { v + spec.noise * unit.sample(&mut rng) } else { v })
                        .collect()
                })
                .collect();
            out.push(FrameSequence {
                channels: 3,
                frame_rate: spec.frame_rate,
                label: g,
                subject: Some(s as u32),
                frames,
            });
        }
    }
    Ok(out)
}
