use std::fs;
use std::path::{Path, PathBuf};

use makgcn::data::{
    load_manifest, split, split_holdout, synth_generate, windows_for_all, FrameSequence, IngestSummary, PipelineConfig,
    Preset, Sample, SynthSpec, HOLDOUT_VAL_FRACTION,
};
use makgcn::model::ModelConfig;
use makgcn::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::TrainArgs;
use crate::{CliError, CliResult};

/// Where a run's sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSpec),
    Files { train: PathBuf, test: Option<PathBuf> },
}

/// File names inside a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub manifest: String,
    pub checkpoint: String,
    pub history: String,
    pub metrics: String,
    pub confusion: String,
    pub summary: String,
    /// Per-seed subdirectory pattern when several seeds run.
    pub seed_dir: String,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            manifest: "run.json".into(),
            checkpoint: "checkpoint.ckpt".into(),
            history: "history.csv".into(),
            metrics: "metrics.json".into(),
            confusion: "confusion.csv".into(),
            summary: "summary.json".into(),
            seed_dir: "seed-{seed}".into(),
        }
    }
}

impl Layout {
    pub fn seed_dir(&self, seed: u64) -> String {
        self.seed_dir.replace("{seed}", &seed.to_string())
    }
}

/// Everything needed to repeat a training or ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub preset: Preset,
    pub source: DataSource,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub layout: Layout,
}

/// Training budget that goes with each preset.
pub fn preset_training(preset: Preset) -> TrainConfig {
    match preset {
        Preset::Synth => TrainConfig { max_epochs: 30, patience: 30, ..TrainConfig::default() },
        Preset::MmActivity | Preset::MiliPoint => TrainConfig::default(),
    }
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

impl RunManifest {
    pub fn from_args(command: &str, a: &TrainArgs) -> CliResult<Self> {
        if let Some(path) = &a.manifest {
            let mut m = Self::load(path)?;
            m.command = command.to_string();
            return Ok(m);
        }
        let mut pipeline = a.preset.pipeline();
        if let Some(v) = a.window {
            pipeline.window_frames = v;
        }
        if let Some(v) = a.stride {
            pipeline.window_stride = v;
        }
        if let Some(v) = a.points {
            pipeline.points_per_frame = v;
        }
        if let Some(v) = a.data_seed {
            pipeline.seed = v;
        }

        let source = match &a.data {
            Some(train) => DataSource::Files {
                train: absolute(train)?,
                test: a.test_data.as_deref().map(absolute).transpose()?,
            },
            None => {
                let mut spec = SynthSpec::default();
                if let Some(v) = a.synth_sequences {
                    spec.sequences_per_class = v;
                }
                DataSource::Synth(spec)
            }
        };

        let mut model = ModelConfig::default();
        if let Some(v) = a.k {
            model.k = v;
        }
        if let Some(v) = a.heads {
            model.num_heads = v;
        }
        if let Some(v) = a.variant {
            model.variant = v;
        }
        if let Some(v) = a.emb_dims {
            model.emb_dims = v;
        }
        if let Some(v) = &a.stage_widths {
            model.stage_widths = v.clone();
        }
        if let Some(v) = &a.fc_widths {
            model.fc_widths = v.clone();
        }
        if let Some(v) = a.mid_channels {
            model.mak_mid_channels = v;
        }
        if let Some(v) = a.dropout {
            model.dropout = v;
        }
        model.num_classes = match (a.classes, &source) {
            (Some(c), _) => c,
            (None, DataSource::Synth(spec)) => spec.classes,
            // settled once the files are read
            (None, DataSource::Files { .. }) => 0,
        };

        let mut train = preset_training(a.preset);
        if let Some(v) = a.lr_max {
            train.lr_max = v;
        }
        if let Some(v) = a.lr_min {
            train.lr_min = v;
        }
        if let Some(v) = a.epochs {
            train.max_epochs = v;
        }
        if let Some(v) = a.patience {
            train.patience = v;
        }
        if let Some(v) = a.batch {
            train.batch_size = v;
        }
        train.dtype = a.dtype;
        let seeds = a.seeds.clone().unwrap_or_else(|| vec![a.seed]);
        train.seed = seeds[0];

        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            preset: a.preset,
            source,
            pipeline,
            model,
            train,
            seeds,
            layout: Layout::default(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(&self.layout.manifest);
        fs::write(&path, self.to_json() + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    /// Rejects settings that cannot run, naming the offending field.
    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("`seeds` must list at least one seed"));
        }
        if self.model.k == 0 {
            return Err(CliError::config("invalid configuration: `k` must be at least 1"));
        }
        if self.model.num_classes > 0 {
            self.model.validate()?;
        }
        self.pipeline.validate()?;
        self.train.validate()?;
        match &self.source {
            DataSource::Synth(spec) => spec.validate()?,
            DataSource::Files { test: None, .. } if self.preset == Preset::MmActivity => {
                return Err(CliError::config(
                    "invalid configuration: `test_data` is required by the mmactivity preset (validation comes from the training list)",
                ))
            }
            DataSource::Files { .. } => {}
        }
        let n = self.pipeline.n_points();
        if self.model.k > n {
            return Err(CliError::config(format!(
                "invalid configuration: `k` = {} exceeds the {n} points per sample",
                self.model.k
            )));
        }
        if self.model.in_channels == 0 {
            return Err(CliError::config("invalid configuration: `in_channels` must be at least 1"));
        }
        Ok(())
    }
}

/// Windowed train, validation and test sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub summary: IngestSummary,
}

fn sequences(source: &DataSource) -> CliResult<(Vec<FrameSequence>, Option<Vec<FrameSequence>>)> {
    match source {
        DataSource::Synth(spec) => Ok((synth_generate(spec)?, None)),
        DataSource::Files { train, test } => {
            let load = |p: &Path| load_manifest(p).map_err(|e| CliError::data(e.to_string()));
            Ok((load(train)?, test.as_deref().map(load).transpose()?))
        }
    }
}

fn check_channels(seqs: &[FrameSequence], expected: usize) -> CliResult<()> {
    match seqs.iter().find(|s| s.channels != expected) {
        Some(s) => Err(CliError::data(format!("sequence has {} channels, model expects {expected}", s.channels))),
        None => Ok(()),
    }
}

/// Loads and windows the run's data. When the manifest leaves the class
/// count open it is set from the largest label seen.
pub fn build_splits(m: &mut RunManifest) -> CliResult<Splits> {
    let (train_seqs, test_seqs) = sequences(&m.source)?;
    if m.model.num_classes == 0 {
        let max = train_seqs.iter().chain(test_seqs.iter().flatten()).map(|s| s.label).max().unwrap_or(0);
        m.model.num_classes = max + 1;
        m.model.validate()?;
    }
    check_channels(&train_seqs, m.model.in_channels)?;
    let (pool, mut summary) = windows_for_all(&train_seqs, &m.pipeline)?;
    let (train, val, test) = match &test_seqs {
        Some(ts) => {
            check_channels(ts, m.model.in_channels)?;
            let (test, s) = windows_for_all(ts, &m.pipeline)?;
            summary.sequences += s.sequences;
            summary.windows += s.windows;
            summary.short_sequences += s.short_sequences;
            let (train, val) = split_holdout(&pool, HOLDOUT_VAL_FRACTION, m.pipeline.seed)?;
            (train, val, test)
        }
        None => split(&pool, m.pipeline.split_ratios, m.pipeline.seed)?,
    };
    if test.is_empty() {
        return Err(CliError::data("the test set holds no windows"));
    }
    if let Some(s) = train.iter().chain(&val).chain(&test).find(|s| s.label >= m.model.num_classes) {
        return Err(CliError::data(format!("label {} outside {} classes", s.label, m.model.num_classes)));
    }
    Ok(Splits { train, val, test, summary })
}
