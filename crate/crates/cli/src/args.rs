use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use makgcn::data::Preset;
use makgcn::model::Variant;
use makgcn::tensor::DType;
use makgcn::train::Averaging;

#[derive(Debug, Parser)]
#[command(name = "makgcn", version, about = "Point-cloud activity recognition with adaptive-kernel graph convolutions")]
pub struct Cli {
    /// More log output on standard error (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and evaluate it on the held-out test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset or on a split of its own run.
    Eval(EvalArgs),
    /// Stream frames from standard input and print a prediction per frame.
    Infer(InferArgs),
    /// Print parameter and MAC counts over k and head sweeps.
    Cost(CostArgs),
    /// Train every architecture variant under one budget and tabulate them.
    Ablate(TrainArgs),
    /// Write a synthetic dataset as frame files plus a file list.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Replay a recorded run manifest; other flags except --out are ignored.
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Output directory.
    #[arg(long, default_value = "makgcn-run")]
    pub out: PathBuf,

    /// File list of training sequences; the synthetic generator is used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Separate file list for the test set; validation is then carved out of --data.
    #[arg(long, requires = "data")]
    pub test_data: Option<PathBuf>,

    #[arg(long, default_value = "synth")]
    pub preset: Preset,

    #[arg(long)]
    pub k: Option<usize>,

    #[arg(long)]
    pub heads: Option<usize>,

    #[arg(long)]
    pub variant: Option<Variant>,

    #[arg(long)]
    pub emb_dims: Option<usize>,

    /// Comma-separated widths of the four stages.
    #[arg(long, value_delimiter = ',')]
    pub stage_widths: Option<Vec<usize>>,

    /// Comma-separated hidden widths of the classifier.
    #[arg(long, value_delimiter = ',')]
    pub fc_widths: Option<Vec<usize>>,

    /// Hidden width of the kernel generator.
    #[arg(long)]
    pub mid_channels: Option<usize>,

    #[arg(long)]
    pub dropout: Option<f64>,

    /// Number of classes; inferred from the data when absent.
    #[arg(long)]
    pub classes: Option<usize>,

    #[arg(long)]
    pub lr_max: Option<f64>,

    #[arg(long)]
    pub lr_min: Option<f64>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub patience: Option<usize>,

    #[arg(long)]
    pub batch: Option<usize>,

    #[arg(long, default_value_t = 7)]
    pub seed: u64,

    /// Comma-separated seeds: one run each plus a mean/std summary.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Option<Vec<u64>>,

    #[arg(long, default_value = "f32")]
    pub dtype: DType,

    /// Frames per window.
    #[arg(long)]
    pub window: Option<usize>,

    #[arg(long)]
    pub stride: Option<usize>,

    /// Points kept per frame.
    #[arg(long)]
    pub points: Option<usize>,

    /// Seed for frame sampling and dataset splits.
    #[arg(long)]
    pub data_seed: Option<u64>,

    /// Synthetic sequences per class.
    #[arg(long)]
    pub synth_sequences: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// File list to evaluate; defaults to a split of the checkpoint's own run.
    #[arg(long)]
    pub data: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "test", conflicts_with = "data")]
    pub split: SplitName,

    /// Write the confusion matrix here instead of standard output.
    #[arg(long)]
    pub confusion: Option<PathBuf>,

    /// Write raw metric fractions as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,

    #[arg(long, default_value_t = 32)]
    pub batch: usize,

    #[arg(long, value_enum, default_value = "weighted")]
    pub averaging: AveragingArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AveragingArg {
    Weighted,
    Macro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Weighted => Averaging::Weighted,
            AveragingArg::Macro => Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Frames per window; defaults to the checkpoint's run.
    #[arg(long)]
    pub window: Option<usize>,

    /// Points per frame; defaults to the checkpoint's run.
    #[arg(long)]
    pub points: Option<usize>,

    /// Frame-sampling seed; defaults to the checkpoint's run.
    #[arg(long)]
    pub data_seed: Option<u64>,

    /// Sequence id selecting the per-frame sampling streams.
    #[arg(long, default_value_t = 0)]
    pub sequence_id: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    /// Neighbour counts as start:stop[:step], inclusive.
    #[arg(long)]
    pub k_sweep: Option<String>,

    /// Head counts as start:stop[:step], inclusive.
    #[arg(long)]
    pub head_sweep: Option<String>,

    #[arg(long, default_value = "sequentialff")]
    pub variant: Variant,

    /// Points per sample.
    #[arg(long, default_value_t = 960)]
    pub points: usize,

    #[arg(long, default_value_t = 5)]
    pub classes: usize,

    #[arg(long)]
    pub emb_dims: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long)]
    pub classes: Option<usize>,

    #[arg(long)]
    pub sequences_per_class: Option<usize>,

    #[arg(long)]
    pub frames: Option<usize>,

    #[arg(long)]
    pub points: Option<usize>,

    #[arg(long)]
    pub noise: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `start:stop[:step]` into the inclusive list it denotes.
pub fn parse_sweep(name: &str, text: &str) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("`{name}`: `{s}` is not a non-negative integer"));
    let (start, stop, step) = match parts.as_slice() {
        [a] => (num(a)?, num(a)?, 1),
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        _ => return Err(format!("`{name}` expects start:stop[:step], got `{text}`")),
    };
    if step == 0 || stop < start {
        return Err(format!("`{name}` needs step >= 1 and stop >= start, got `{text}`"));
    }
    Ok((start..=stop).step_by(step).collect())
}
