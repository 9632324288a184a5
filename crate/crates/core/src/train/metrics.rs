use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-class precision, recall and F1 are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Weighted by each class's true-label count.
    #[default]
    Weighted,
    /// Unweighted mean over classes.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>, averaging: Averaging) -> Result<Self> {
        let g = confusion.len();
        if g == 0 || confusion.iter().any(|r| r.len() != g) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("confusion matrix is empty"));
        }
        let correct: u64 = (0..g).map(|c| confusion[c][c]).sum();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for c in 0..g {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let pc = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let rc = if support > 0 { tp / support as f64 } else { 0.0 };
            let fc = if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 };
            let w = match averaging {
                Averaging::Weighted => support as f64 / total as f64,
                Averaging::Macro => 1.0 / g as f64,
            };
            p += w * pc;
            r += w * rc;
            f += w * fc;
        }
        Ok(Metrics {
            accuracy: correct as f64 / total as f64,
            precision: p,
            recall: r,
            f1: f,
            confusion,
        })
    }

    /// Builds the confusion matrix from paired labels.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize, averaging: Averaging) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("label and prediction counts differ"));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::invalid(format!("class id out of range for {num_classes} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion, averaging)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
