//! Optimization: cosine-annealed momentum SGD with early stopping on the
//! validation loss, evaluation metrics and checkpoints.

mod checkpoint;
mod metrics;

pub use checkpoint::{Blob, Checkpoint, CheckpointManifest, FORMAT_VERSION};
pub use metrics::{argmax, Averaging, Metrics};

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{no_grad, softmax_cross_entropy, softmax_rows, DType, Element, Mode, Parameter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 250,
            patience: 30,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_max > self.lr_min) {
            return Err(Error::config("lr_max", "must exceed lr_min, and lr_min must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate at step `t` of `total`; past the end it stays at `lr_min`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t > total {
        log::warn!("cosine schedule queried at t = {t} beyond T = {total}; using lr_min");
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// One momentum-SGD update with L2 weight decay, in place.
pub fn sgd_step<T: Element>(params: &mut [&mut Parameter<T>], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mom, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for p in params.iter_mut() {
        let grad = p.grad();
        let mut buf = p.momentum.take().unwrap_or_else(|| vec![T::zero(); grad.len()]);
        let data = p.data_mut();
        for ((w, b), g) in data.iter_mut().zip(buf.iter_mut()).zip(grad) {
            let g = g + wd * *w;
            *b = mom * *b + g;
            *w = *w - lr * *b;
        }
        p.momentum = Some(buf);
    }
}

/// Patience-based stopping on a loss that should decrease. Epochs are
/// 1-based; only a strictly lower loss counts as an improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Observation {
        let improved = self.best.map_or(true, |(_, b)| loss < b);
        if improved {
            self.best = Some((epoch, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: !improved && self.stale >= self.patience,
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc);
    }
    s
}

/// Where `fit` writes the best checkpoint as it improves.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub path: PathBuf,
    pub extra: serde_json::Value,
}

#[derive(Debug)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best: Checkpoint,
    pub stopped_early: bool,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Eval-mode pass: mean cross-entropy and per-sample logits.
fn eval_pass<T: Element>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<(f64, Vec<Vec<T>>)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let classes = model.config().num_classes;
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = Sample::stack::<T>(&refs)?;
        let out = no_grad(|| model.forward(&x, Mode::Eval, None))?;
        let l = no_grad(|| softmax_cross_entropy(&out, &labels))?;
        loss += l.item().to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        logits.extend(out.data().chunks(classes).map(|r| r.to_vec()));
    }
    Ok((loss / samples.len() as f64, logits))
}

/// Predicted class and softmax scores per sample.
pub fn predict<T: Element>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let (_, logits) = eval_pass(model, samples, batch_size)?;
    let classes = model.config().num_classes;
    let flat: Vec<T> = logits.concat();
    let probs = softmax_rows(&crate::tensor::Tensor::from_vec(flat, &[samples.len(), classes])?)?;
    Ok(probs
        .data()
        .chunks(classes)
        .zip(&logits)
        .map(|(p, l)| (argmax(l), p.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
        .collect())
}

/// Loss and metrics on a labelled set in eval mode.
pub fn evaluate<T: Element>(model: &Model<T>, samples: &[Sample], batch_size: usize, averaging: Averaging) -> Result<(f64, Metrics)> {
    let (loss, logits) = eval_pass(model, samples, batch_size)?;
    let predicted: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok((loss, Metrics::from_predictions(&truth, &predicted, model.config().num_classes, averaging)?))
}

/// Trains `model` in place and leaves it holding the best-validation state.
pub fn fit<T: Element>(
    model: &mut Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let classes = model.config().num_classes;
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= classes) {
        return Err(Error::invalid(format!("label {} outside the model's {classes} classes", s.label)));
    }

    let extra = sink.map(|s| s.extra.clone()).unwrap_or(serde_json::Value::Null);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best = Checkpoint::capture(model, 0, f64::INFINITY, None, extra.clone());
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let lr = cosine_lr(epoch - 1, cfg.max_epochs, cfg.lr_max, cfg.lr_min);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, 2 * epoch as u64));
        let mut drop_rng = epoch_rng(cfg.seed, 2 * epoch as u64 + 1);

        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = Sample::stack::<T>(&refs)?;
            model.zero_grad();
            let logits = model.forward(&x, Mode::Train, Some(&mut drop_rng))?;
            let loss = softmax_cross_entropy(&logits, &labels)?;
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("training loss became {value}"),
                });
            }
            loss.backward()?;
            sgd_step(&mut model.parameters_mut(), lr, cfg.momentum, cfg.weight_decay);
            total += value * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;

        let (val_loss, metrics) = evaluate(model, val, cfg.batch_size, Averaging::Weighted)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss became {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc: metrics.accuracy,
        });
        log::info!("epoch {epoch}: lr {lr:.5} train {train_loss:.4} val {val_loss:.4} acc {:.4}", metrics.accuracy);

        let obs = stopper.observe(epoch, val_loss);
        if obs.improved {
            best = Checkpoint::capture(model, epoch, val_loss, Some(metrics), extra.clone());
            if let Some(s) = sink {
                best.save(&s.path)?;
            }
        }
        if obs.stop {
            stopped_early = true;
            break;
        }
    }

    best.restore(model)?;
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    Ok(FitReport {
        history,
        best_epoch,
        best_val_loss,
        best,
        stopped_early,
    })
}
