//! Frame sequences, fixed-size windows, dataset splits, streaming assembly
//! and a synthetic activity generator.

mod io;
mod synth;

pub use io::{
    format_frame_text, load_manifest, parse_frame_header, parse_frame_line, parse_frame_text, read_frame_file, read_manifest,
    write_frame_file, FrameHeader,
};
pub use synth::{synth_generate, SynthSpec};

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Time-ordered radar frames of one recording. Frame `i` holds `m_i` points
/// stored point-major (`m_i * channels` values).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub channels: usize,
    pub frame_rate: f64,
    pub label: usize,
    pub subject: Option<u32>,
    pub frames: Vec<Vec<f64>>,
}

/// One network input: `(C, N)` values stored channel-major, `N = T * P`,
/// point column `t * P + p` holding point `p` of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub channels: usize,
    pub n_points: usize,
    pub values: Vec<f64>,
    pub label: usize,
}

impl Sample {
    /// Batches samples into `(B, C, N)` plus their labels.
    pub fn stack<T: Element>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<usize>)> {
        let first = samples.first().ok_or_else(|| Error::invalid("cannot batch zero samples"))?;
        let (c, n) = (first.channels, first.n_points);
        if let Some(s) = samples.iter().find(|s| s.channels != c || s.n_points != n) {
            return Err(Error::invalid(format!(
                "sample of shape ({}, {}) in a batch of ({c}, {n})",
                s.channels, s.n_points
            )));
        }
        let values: Vec<f64> = samples.iter().flat_map(|s| s.values.iter().copied()).collect();
        Ok((Tensor::from_f64(&values, &[samples.len(), c, n])?, samples.iter().map(|s| s.label).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub window_frames: usize,
    pub window_stride: usize,
    pub points_per_frame: usize,
    /// Train, validation and test fractions of a single pool.
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_frames: 60,
            window_stride: 10,
            points_per_frame: 16,
            split_ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("window_frames", self.window_frames),
            ("window_stride", self.window_stride),
            ("points_per_frame", self.points_per_frame),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        validate_ratios(&self.split_ratios)
    }

    /// Points per sample, `T * P`.
    pub fn n_points(&self) -> usize {
        self.window_frames * self.points_per_frame
    }
}

fn validate_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::config("split_ratios", "every ratio must be positive"));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", "ratios must sum to 1"));
    }
    Ok(())
}

/// Named dataset recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 60-frame windows every 10 frames; validation is 20 % of the training
    /// files, test comes from its own file list.
    MmActivity,
    /// Same windows; 0.8 / 0.1 / 0.1 random split of a single pool.
    MiliPoint,
    /// Desk-scale synthetic activities.
    Synth,
}

/// Validation share carved out of the training pool when the test set is
/// supplied separately.
pub const HOLDOUT_VAL_FRACTION: f64 = 0.2;

impl Preset {
    pub fn pipeline(self) -> PipelineConfig {
        match self {
            Preset::MmActivity | Preset::MiliPoint => PipelineConfig::default(),
            Preset::Synth => PipelineConfig {
                window_frames: 6,
                window_stride: 70,
                points_per_frame: 4,
                split_ratios: [0.8, 0.1, 0.1],
                seed: 7,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmactivity" => Ok(Preset::MmActivity),
            "milipoint" => Ok(Preset::MiliPoint),
            "synth" => Ok(Preset::Synth),
            _ => Err(Error::config("preset", format!("unknown preset '{s}' (mmactivity, milipoint, synth)"))),
        }
    }
}

/// Independent stream for frame `frame` of sequence `sequence`.
pub fn frame_rng(seed: u64, sequence: u64, frame: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sequence.to_le_bytes());
    key[16..24].copy_from_slice(&frame.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Exactly `p` points (point-major, `p * channels` values): a seeded
/// order-preserving subset when there are more, zero rows appended when
/// there are fewer.
pub fn normalize_frame(points: &[f64], channels: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = points.len() / channels;
    if m > p {
        let mut keep = sample_indices(rng, m, p).into_vec();
        keep.sort_unstable();
        keep.iter().flat_map(|&i| points[i * channels..(i + 1) * channels].iter().copied()).collect()
    } else {
        let mut out = points[..m * channels].to_vec();
        out.resize(p * channels, 0.0);
        out
    }
}

/// Stacks `T` normalized point-major frames into a channel-major sample.
fn stack_frames<'a>(frames: impl Iterator<Item = &'a Vec<f64>>, channels: usize, t: usize, p: usize, label: usize) -> Sample {
    let n = t * p;
    let mut values = vec![0.0; channels * n];
    for (ti, frame) in frames.enumerate() {
        for pi in 0..p {
            for c in 0..channels {
                values[c * n + ti * p + pi] = frame[pi * channels + c];
            }
        }
    }
    Sample {
        channels,
        n_points: n,
        values,
        label,
    }
}

/// Sliding windows of `t` frames every `stride` frames, each frame reduced
/// to `p` points. `sequence_id` selects the per-frame sampling streams.
pub fn make_windows(seq: &FrameSequence, sequence_id: u64, t: usize, stride: usize, p: usize, seed: u64) -> Vec<Sample> {
    let f = seq.frames.len();
    if t == 0 || stride == 0 || f < t {
        return Vec::new();
    }
    let normalized: Vec<Vec<f64>> = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, fr)| normalize_frame(fr, seq.channels, p, &mut frame_rng(seed, sequence_id, i as u64)))
        .collect();
    (0..=(f - t) / stride)
        .map(|w| stack_frames(normalized[w * stride..w * stride + t].iter(), seq.channels, t, p, seq.label))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub sequences: usize,
    pub windows: usize,
    /// Sequences shorter than one window, which contribute nothing.
    pub short_sequences: usize,
}

/// Windows every sequence with the pipeline settings, using the position in
/// `seqs` as the sequence id.
pub fn windows_for_all(seqs: &[FrameSequence], cfg: &PipelineConfig) -> Result<(Vec<Sample>, IngestSummary)> {
    cfg.validate()?;
    if let Some(s) = seqs.windows(2).find(|w| w[0].channels != w[1].channels) {
        return Err(Error::invalid(format!("mixed channel counts {} and {}", s[0].channels, s[1].channels)));
    }
    let mut summary = IngestSummary { sequences: seqs.len(), ..Default::default() };
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let w = make_windows(s, i as u64, cfg.window_frames, cfg.window_stride, cfg.points_per_frame, cfg.seed);
        if w.is_empty() {
            summary.short_sequences += 1;
        }
        out.extend(w);
    }
    summary.windows = out.len();
    if summary.short_sequences > 0 {
        log::warn!("{} of {} sequences are shorter than one window", summary.short_sequences, summary.sequences);
    }
    Ok((out, summary))
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.into_iter().map(|i| items[i].clone()).collect()
}

fn share(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Seeded shuffle, then contiguous train / validation / test blocks.
/// Validation and test get `floor(n * ratio)`; the remainder goes to train.
pub fn split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    validate_ratios(&ratios)?;
    let n = items.len();
    let (n_val, n_test) = (share(n, ratios[1]), share(n, ratios[2]));
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config(
            "split_ratios",
            format!("{n} samples give an empty split ({n_train}/{n_val}/{n_test})"),
        ));
    }
    let mut all = shuffled(items, seed);
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok((all, val, test))
}

/// Seeded shuffle into training and validation parts, validation getting
/// `floor(n * val_fraction)`.
pub fn split_holdout<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config("val_fraction", "must lie in (0, 1)"));
    }
    let n_val = share(items.len(), val_fraction);
    if n_val == 0 || n_val == items.len() {
        return Err(Error::config("val_fraction", format!("{} samples give an empty split", items.len())));
    }
    let mut all = shuffled(items, seed);
    let val = all.split_off(items.len() - n_val);
    Ok((all, val))
}

/// Ring buffer of the last `T` normalized frames of a live stream.
#[derive(Debug, Clone)]
pub struct StreamAssembler {
    channels: usize,
    window: usize,
    points: usize,
    seed: u64,
    sequence_id: u64,
    label: usize,
    pushed: u64,
    ring: VecDeque<Vec<f64>>,
}

impl StreamAssembler {
    /// Frames are sampled with the same streams `make_windows` uses for
    /// sequence `sequence_id`. Emitted samples carry `label`.
    pub fn new(channels: usize, window: usize, points: usize, seed: u64, sequence_id: u64, label: usize) -> Result<Self> {
        for (field, v) in [("channels", channels), ("window_frames", window), ("points_per_frame", points)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(StreamAssembler {
            channels,
            window,
            points,
            seed,
            sequence_id,
            label,
            pushed: 0,
            ring: VecDeque::with_capacity(window),
        })
    }

    /// Frames consumed so far.
    pub fn frames_seen(&self) -> u64 {
        self.pushed
    }

    /// Adds one point-major frame; returns the latest window once `T`
    /// frames have arrived.
    pub fn push(&mut self, frame: &[f64]) -> Result<Option<Sample>> {
        if frame.len() % self.channels != 0 {
            return Err(Error::invalid(format!(
                "frame of {} values is not a whole number of {}-channel points",
                frame.len(),
                self.channels
            )));
        }
        let mut rng = frame_rng(self.seed, self.sequence_id, self.pushed);
        self.pushed += 1;
        if self.ring.len() == self.window {
            self.ring.pop_front();
        }
        self.ring.push_back(normalize_frame(frame, self.channels, self.points, &mut rng));
        Ok((self.ring.len() == self.window)
            .then(|| stack_frames(self.ring.iter(), self.channels, self.window, self.points, self.label)))
    }
}
