use std::sync::Mutex;

use super::{Element, Mode, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean/variance of one batch-norm layer.
#[derive(Debug)]
pub struct BatchNormStats<T: Element> {
    inner: Mutex<(Vec<T>, Vec<T>)>,
}

impl<T: Element> BatchNormStats<T> {
    /// Mean 0, variance 1 for every channel.
    pub fn new(channels: usize) -> Self {
        Self::from_parts(vec![T::zero(); channels], vec![T::one(); channels])
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Self {
        assert_eq!(mean.len(), var.len());
        BatchNormStats {
            inner: Mutex::new((mean, var)),
        }
    }

    pub fn channels(&self) -> usize {
        self.lock().0.len()
    }

    pub fn mean(&self) -> Vec<T> {
        self.lock().0.clone()
    }

    pub fn var(&self) -> Vec<T> {
        self.lock().1.clone()
    }

    pub fn set(&self, mean: Vec<T>, var: Vec<T>) {
        let mut g = self.lock();
        assert_eq!(mean.len(), g.0.len());
        assert_eq!(var.len(), g.1.len());
        *g = (mean, var);
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, (Vec<T>, Vec<T>)> {
        self.inner.lock().expect("batch-norm stats lock")
    }
}

/// Per-channel normalization of a `(B, C, ...)` tensor followed by
/// `gamma * x_hat + beta`.
///
/// Train mode normalizes with the batch statistics (biased variance) over all
/// non-channel axes and folds them into `stats` by exponential moving average
/// (the running variance uses the unbiased estimate). Eval mode uses `stats`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchNormStats<T>,
    mode: Mode,
    momentum: f64,
    epsilon: f64,
) -> Result<Tensor<T>> {
    if epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm epsilon must be positive"));
    }
    if input.rank() < 2 {
        return Err(Error::invalid(format!(
            "batch_norm expects (B, C, ...), got {:?}",
            input.shape()
        )));
    }
    let batch = input.shape()[0];
    let channels = input.shape()[1];
    if gamma.shape() != [channels] || beta.shape() != [channels] || stats.channels() != channels {
        return Err(Error::Shape {
            op: "batch_norm",
            lhs: input.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let positions: usize = input.shape()[2..].iter().product();
    let count = batch * positions;
    if mode == Mode::Train && count == 0 {
        return Err(Error::invalid("batch_norm over a zero-size batch in train mode"));
    }

    let x = input.data();
    let eps = T::from_f64_lossy(epsilon);
    let slice = |b: usize, c: usize| &x[(b * channels + c) * positions..(b * channels + c + 1) * positions];

    let (mean, var) = match mode {
        Mode::Train => {
            let n = T::from_usize(count).expect("count");
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for c in 0..channels {
                let s: T = (0..batch).map(|b| slice(b, c).iter().copied().sum::<T>()).sum();
                let m = s / n;
                let ss: T = (0..batch)
                    .map(|b| slice(b, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>())
                    .sum();
                mean[c] = m;
                var[c] = ss / n;
            }
            let mom = T::from_f64_lossy(momentum);
            let unbias = if count > 1 {
                n / (n - T::one())
            } else {
                T::one()
            };
            let mut g = stats.lock();
            for c in 0..channels {
                g.0[c] = (T::one() - mom) * g.0[c] + mom * mean[c];
                g.1[c] = (T::one() - mom) * g.1[c] + mom * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => {
            let g = stats.lock();
            (g.0.clone(), g.1.clone())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut data = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * positions;
            let (m, is, gm, bt) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for p in start..start + positions {
                let h = (x[p] - m) * is;
                x_hat[p] = h;
                data[p] = gm * h + bt;
            }
        }
    }

    Ok(Tensor::from_op(
        data,
        input.shape().to_vec(),
        "batch_norm",
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |g, inputs| {
            let (xin, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gh = vec![T::zero(); channels];
            for b in 0..batch {
                for c in 0..channels {
                    let start = (b * channels + c) * positions;
                    for p in start..start + positions {
                        sum_g[c] = sum_g[c] + g[p];
                        sum_gh[c] = sum_gh[c] + g[p] * x_hat[p];
                    }
                }
            }
            let gx = xin.requires_grad().then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let n = T::from_usize(count.max(1)).expect("count");
                for b in 0..batch {
                    for c in 0..channels {
                        let start = (b * channels + c) * positions;
                        let k = gamma.data()[c] * inv_std[c];
                        for p in start..start + positions {
                            gx[p] = match mode {
                                Mode::Train => {
                                    k * (g[p] - sum_g[c] / n - x_hat[p] * sum_gh[c] / n)
                                }
                                Mode::Eval => k * g[p],
                            };
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                gamma.requires_grad().then(|| sum_gh.clone()),
                beta.requires_grad().then(|| sum_g.clone()),
            ]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones(&[c]), Tensor::zeros(&[c]))
    }

    #[test]
    fn eval_with_identity_stats_is_near_identity() {
        let x = Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
        let (g, b) = affine(2);
        let stats = BatchNormStats::new(2);
        let y = batch_norm(&x, &g, &b, &stats, Mode::Eval, BN_MOMENTUM, BN_EPSILON).unwrap();
        let k = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e * k).abs() < 1e-15);
        }
    }

    #[test]
    fn train_constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[4, 1, 3], 7.5);
        let g = Tensor::ones(&[1]);
        let b = Tensor::full(&[1], 0.25);
        let stats = BatchNormStats::new(1);
        let y = batch_norm(&x, &g, &b, &stats, Mode::Train, BN_MOMENTUM, BN_EPSILON).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn train_two_values_normalize_to_unit() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0], &[2, 1]).unwrap();
        let (g, b) = affine(1);
        let stats = BatchNormStats::new(1);
        let y = batch_norm(&x, &g, &b, &stats, Mode::Train, BN_MOMENTUM, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
        // running stats: mean 0.9*0 + 0.1*2, var 0.9*1 + 0.1*(1 * 2/1)
        assert!((stats.mean()[0] - 0.2).abs() < 1e-15);
        assert!((stats.var()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_batch_in_train_mode_is_rejected() {
        let x = Tensor::<f64>::from_vec(vec![], &[0, 2]).unwrap();
        let (g, b) = affine(2);
        let stats = BatchNormStats::new(2);
        let err = batch_norm(&x, &g, &b, &stats, Mode::Train, BN_MOMENTUM, BN_EPSILON);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn non_positive_epsilon_is_rejected() {
        let x = Tensor::<f64>::ones(&[2, 1]);
        let (g, b) = affine(1);
        let stats = BatchNormStats::new(1);
        assert!(batch_norm(&x, &g, &b, &stats, Mode::Eval, 0.1, 0.0).is_err());
    }
}
