//! The five-stage network: shared neighbour graph, four edge-feature stages,
//! feature fusion, global pooling and a fully-connected classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{graph_feature, knn};
use crate::mak::{MakConfig, MakLayer, DEFAULT_MID_CHANNELS};
use crate::nn::{BatchNorm, ConvBlock, Linear, Module, DEFAULT_LEAKY_SLOPE};
use crate::tensor::{concat, dropout, reduce, BatchNormStats, Element, Mode, Parameter, ReduceKind, Tensor};

/// Layer ordering of the four feature stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    /// Four adaptive-kernel stages, classifier fed from the last stage only.
    MakOnly,
    /// Four adaptive-kernel stages with feature fusion.
    MakFF,
    /// Adaptive, conventional, adaptive, conventional; with fusion.
    SandwichFF,
    /// Two adaptive stages then two conventional ones; with fusion.
    #[default]
    SequentialFF,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MakOnly, Variant::MakFF, Variant::SandwichFF, Variant::SequentialFF];

    /// `true` where the stage is an adaptive-kernel layer.
    pub fn stage_kinds(self) -> [bool; 4] {
        match self {
            Variant::MakOnly | Variant::MakFF => [true; 4],
            Variant::SandwichFF => [true, false, true, false],
            Variant::SequentialFF => [true, true, false, false],
        }
    }

    pub fn fuses_stages(self) -> bool {
        self != Variant::MakOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::MakOnly => "MakOnly",
            Variant::MakFF => "MakFF",
            Variant::SandwichFF => "SandwichFF",
            Variant::SequentialFF => "SequentialFF",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are ignored (`sequential-ff`, `MakOnly`).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_lowercase() == key)
            .ok_or_else(|| Error::config("variant", format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub k: usize,
    pub num_heads: usize,
    pub stage_widths: Vec<usize>,
    pub emb_dims: usize,
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub mak_mid_channels: usize,
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            k: 20,
            num_heads: 1,
            stage_widths: vec![64, 64, 128, 256],
            emb_dims: 1024,
            fc_widths: vec![512, 256],
            num_classes: 5,
            variant: Variant::SequentialFF,
            dropout: 0.5,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            mak_mid_channels: DEFAULT_MID_CHANNELS,
            residual: true,
        }
    }
}

/// Channel plan of one feature stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePlan {
    Mak(MakConfig),
    Conv { in_channels: usize, out_channels: usize },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("k", self.k),
            ("num_heads", self.num_heads),
            ("emb_dims", self.emb_dims),
            ("mak_mid_channels", self.mak_mid_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.stage_widths.len() != 4 {
            return Err(Error::config("stage_widths", format!("needs exactly 4 entries, got {}", self.stage_widths.len())));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::config("stage_widths", "every width must be at least 1"));
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::config("fc_widths", "every width must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("leaky_slope", "must be finite"));
        }
        Ok(())
    }

    pub fn stage_plans(&self) -> Vec<StagePlan> {
        let geo = 2 * self.in_channels;
        let mut input = geo;
        self.variant
            .stage_kinds()
            .iter()
            .zip(&self.stage_widths)
            .map(|(&is_mak, &width)| {
                let plan = if is_mak {
                    StagePlan::Mak(MakConfig {
                        in_channels: input,
                        out_channels: width,
                        gen_in_channels: geo,
                        num_heads: self.num_heads,
                        mid_channels: self.mak_mid_channels,
                        residual: self.residual,
                    })
                } else {
                    StagePlan::Conv { in_channels: input, out_channels: width }
                };
                input = 2 * width;
                plan
            })
            .collect()
    }

    /// Channel width entering the embedding map.
    pub fn fusion_width(&self) -> usize {
        if self.variant.fuses_stages() {
            self.stage_widths.iter().sum()
        } else {
            self.stage_widths[3]
        }
    }
}

/// Exact number of trainable scalars of a model built from `config`.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let stages: usize = config
        .stage_plans()
        .iter()
        .map(|p| match p {
            StagePlan::Mak(c) => c.parameter_count(),
            StagePlan::Conv { in_channels, out_channels } => ConvBlock::<f32>::parameter_count(*in_channels, *out_channels),
        })
        .sum();
    let mut total = stages + ConvBlock::<f32>::parameter_count(config.fusion_width(), config.emb_dims);
    let mut width = 2 * config.emb_dims;
    for &w in &config.fc_widths {
        total += ConvBlock::<f32>::parameter_count(width, w);
        width = w;
    }
    Ok(total + width * config.num_classes + config.num_classes)
}

/// Multiply-accumulates of one forward pass on a single sample of
/// `n_points` points. Comparisons, normalization and activations are not
/// counted.
pub fn count_macs(config: &ModelConfig, n_points: usize) -> Result<u64> {
    config.validate()?;
    if n_points < config.k {
        return Err(Error::invalid(format!("N = {n_points} is smaller than k = {}", config.k)));
    }
    let (n, grid) = (n_points, n_points * config.k);
    let mut total = config.in_channels * n * n;
    for plan in config.stage_plans() {
        total += match plan {
            StagePlan::Mak(c) => c.mac_count(grid),
            StagePlan::Conv { in_channels, out_channels } => grid * in_channels * out_channels,
        };
    }
    total += n * config.fusion_width() * config.emb_dims;
    let mut width = 2 * config.emb_dims;
    for &w in &config.fc_widths {
        total += width * w;
        width = w;
    }
    total += width * config.num_classes;
    Ok(total as u64)
}

#[derive(Debug)]
pub enum Stage<T: Element> {
    Mak(MakLayer<T>),
    Conv(ConvBlock<T>),
}

impl<T: Element> Module<T> for Stage<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        match self {
            Stage::Mak(l) => l.parameters(out),
            Stage::Conv(c) => c.parameters(out),
        }
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        match self {
            Stage::Mak(l) => l.parameters_mut(out),
            Stage::Conv(c) => c.parameters_mut(out),
        }
    }

    fn buffers<'a>(&'a self, out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {
        match self {
            Stage::Mak(l) => l.buffers(out),
            Stage::Conv(c) => c.buffers(out),
        }
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Debug)]
pub struct ForwardTrace<T: Element> {
    pub logits: Tensor<T>,
    /// Kernel-generation input of each adaptive-kernel stage, in order.
    pub geo_inputs: Vec<Tensor<T>>,
    /// Per-stage outputs after max-pooling over neighbours, `(B, C_i, N)`.
    pub stage_outputs: Vec<Tensor<T>>,
    /// Input of the embedding map, `(B, fusion_width, N)`.
    pub fused: Tensor<T>,
}

#[derive(Debug)]
pub struct Model<T: Element> {
    config: ModelConfig,
    pub stages: Vec<Stage<T>>,
    pub embedding: ConvBlock<T>,
    pub classifier: Vec<ConvBlock<T>>,
    pub head: Linear<T>,
}

impl<T: Element> Model<T> {
    /// Builds a model with deterministic initialization derived from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.leaky_slope;
        let mut stages = Vec::with_capacity(4);
        for (i, plan) in config.stage_plans().into_iter().enumerate() {
            stages.push(match plan {
                StagePlan::Mak(c) => Stage::Mak(MakLayer::with_slope(&format!("mak{}", i + 1), c, slope, &mut rng)?),
                StagePlan::Conv { in_channels, out_channels } => {
                    Stage::Conv(ConvBlock::new(&format!("conv{}", i + 1), in_channels, out_channels, slope, &mut rng)?)
                }
            });
        }
        let embedding = ConvBlock::new("emb", config.fusion_width(), config.emb_dims, slope, &mut rng)?;
        let mut classifier = Vec::with_capacity(config.fc_widths.len());
        let mut width = 2 * config.emb_dims;
        for (i, &w) in config.fc_widths.iter().enumerate() {
            let prefix = format!("fc{}", i + 1);
            classifier.push(ConvBlock {
                linear: Linear::new(&format!("{prefix}.linear"), width, w, &mut rng)?,
                bn: BatchNorm::new(&format!("{prefix}.bn"), w)?,
                slope,
            });
            width = w;
        }
        let head = Linear::new("head", width, config.num_classes, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            stages,
            embedding,
            classifier,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Logits `(B, num_classes)` for points `(B, C, N)`. Train mode with
    /// non-zero dropout needs `rng`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(x, mode, rng)?.logits)
    }

    pub fn forward_traced(&self, x: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        let &[_, c, n] = x.shape() else {
            return Err(Error::invalid(format!("expected (B, C, N) points, got {:?}", x.shape())));
        };
        if c != cfg.in_channels {
            return Err(Error::invalid(format!("expected {} channels, got {c}", cfg.in_channels)));
        }
        if n < cfg.k {
            return Err(Error::invalid(format!("N = {n} is smaller than k = {}", cfg.k)));
        }
        let dropping = mode == Mode::Train && cfg.dropout > 0.0 && !cfg.fc_widths.is_empty();
        if dropping && rng.is_none() {
            return Err(Error::Usage("train-mode forward with dropout needs an RNG".into()));
        }

        let idx = knn(&x.detach(), cfg.k)?;
        let geo = graph_feature(x, &idx)?;
        let mut geo_inputs = Vec::new();
        let mut stage_outputs: Vec<Tensor<T>> = Vec::with_capacity(4);
        for stage in &self.stages {
            let feat = match stage_outputs.last() {
                None => geo.clone(),
                Some(prev) => graph_feature(prev, &idx)?,
            };
            let y = match stage {
                Stage::Mak(layer) => {
                    geo_inputs.push(geo.clone());
                    layer.forward(&geo, &feat, mode)?
                }
                Stage::Conv(block) => block.forward(&feat, mode)?,
            };
            stage_outputs.push(reduce(&y, 3, ReduceKind::Max)?);
        }

        let fused = if cfg.variant.fuses_stages() {
            concat(&stage_outputs, 1)?
        } else {
            stage_outputs[3].clone()
        };
        let emb = self.embedding.forward(&fused, mode)?;
        let pooled = concat(&[reduce(&emb, 2, ReduceKind::Max)?, reduce(&emb, 2, ReduceKind::Mean)?], 1)?;

        let mut h = pooled;
        let mut rng = rng;
        for block in &self.classifier {
            h = block.forward(&h, mode)?;
            if dropping {
                h = dropout(&h, cfg.dropout, rng.as_deref_mut().expect("checked above"));
            }
        }
        Ok(ForwardTrace {
            logits: self.head.forward(&h)?,
            geo_inputs,
            stage_outputs,
            fused,
        })
    }

    /// All trainable parameters in a stable order.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        Module::parameters(self, &mut out);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        Module::parameters_mut(self, &mut out);
        out
    }

    /// Batch-norm running statistics keyed by layer name.
    pub fn buffers(&self) -> Vec<(&str, &BatchNormStats<T>)> {
        let mut out = Vec::new();
        Module::buffers(self, &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn parameters<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.stages.iter().for_each(|s| s.parameters(out));
        self.embedding.parameters(out);
        self.classifier.iter().for_each(|c| c.parameters(out));
        self.head.parameters(out);
    }

    fn parameters_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.stages.iter_mut().for_each(|s| s.parameters_mut(out));
        self.embedding.parameters_mut(out);
        self.classifier.iter_mut().for_each(|c| c.parameters_mut(out));
        self.head.parameters_mut(out);
    }

    fn buffers<'a>(&'a self, out: &mut Vec<(&'a str, &'a BatchNormStats<T>)>) {
        self.stages.iter().for_each(|s| s.buffers(out));
        self.embedding.buffers(out);
        self.classifier.iter().for_each(|c| c.buffers(out));
    }
}
