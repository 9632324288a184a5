//! Shared k-nearest-neighbour structure and edge features.
//!
//! The neighbourhood of every point is computed once from the raw
//! coordinates and reused by every layer of the network.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::{Element, Tensor};

/// Per-sample `(N, k)` table of neighbour indices, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    batch: usize,
    n_points: usize,
    k: usize,
}

impl NeighborIndex {
    /// Wraps a raw `(B, N, k)` table, checking every entry is a valid point.
    pub fn new(indices: Vec<usize>, batch: usize, n_points: usize, k: usize) -> Result<Self> {
        if indices.len() != batch * n_points * k {
            return Err(Error::invalid(format!(
                "neighbour table of {} entries does not match ({batch}, {n_points}, {k})",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_points) {
            return Err(Error::invalid(format!(
                "neighbour index {bad} out of range for {n_points} points"
            )));
        }
        Ok(NeighborIndex {
            indices,
            batch,
            n_points,
            k,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    /// Neighbours of point `i` in sample `b`.
    pub fn row(&self, b: usize, i: usize) -> &[usize] {
        let start = (b * self.n_points + i) * self.k;
        &self.indices[start..start + self.k]
    }
}

fn check_points<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, n] if c >= 1 && n >= 1 => Ok((b, c, n)),
        _ => Err(Error::invalid(format!(
            "expected a (B, C, N) point tensor with C, N >= 1, got {:?}",
            x.shape()
        ))),
    }
}

/// Negated squared distances `-(|x_i|^2 + |x_j|^2) + 2<x_i, x_j>`, clamped
/// to be non-positive. Larger means closer; the diagonal is zero up to
/// rounding. Returns `(B, N, N)`. Not differentiable.
pub fn pairwise_similarity<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, channels, n) = check_points(x)?;
    let mut out = vec![T::zero(); batch * n * n];
    let two = T::one() + T::one();
    for b in 0..batch {
        let xb = &x.data()[b * channels * n..(b + 1) * channels * n];
        let ob = &mut out[b * n * n..(b + 1) * n * n];
        // X^T X, with X stored (C, N)
        T::gemm(n, channels, n, two, xb, (1, n), xb, (n, 1), T::zero(), ob, (n, 1));
        let norms: Vec<T> = (0..n)
            .map(|i| (0..channels).map(|c| xb[c * n + i] * xb[c * n + i]).sum())
            .collect();
        for i in 0..n {
            for j in i..n {
                let d = (ob[i * n + j] - (norms[i] + norms[j])).min(T::zero());
                ob[i * n + j] = d;
                ob[j * n + i] = d;
            }
        }
    }
    instrument::add_macs(batch * channels * n * n);
    Ok(Tensor::from_vec(out, &[batch, n, n])?.detach())
}

/// Indices of the `k` nearest points (self included) for every point,
/// nearest first, ties broken by lowest index.
pub fn knn<T: Element>(x: &Tensor<T>, k: usize) -> Result<NeighborIndex> {
    let (batch, _, n) = check_points(x)?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k = {k} must be in [1, N] with N = {n}"
        )));
    }
    instrument::count_knn();
    let sim = pairwise_similarity(x)?;
    let mut indices = Vec::with_capacity(batch * n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for row in sim.data().chunks(n) {
        let closer = |a: &usize, b: &usize| -> Ordering {
            row[*b]
                .partial_cmp(&row[*a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        order.clear();
        order.extend(0..n);
        if k < n {
            order.select_nth_unstable_by(k - 1, closer);
        }
        let head = &mut order[..k];
        head.sort_unstable_by(closer);
        indices.extend_from_slice(head);
    }
    NeighborIndex::new(indices, batch, n, k)
}

/// Edge features `(B, 2C, N, k)`: channels `[0, C)` hold `x_j - x_i` for each
/// neighbour `j` of `i`, channels `[C, 2C)` repeat `x_i` along the neighbour
/// axis. Differentiable with respect to `x`.
pub fn graph_feature<T: Element>(x: &Tensor<T>, idx: &NeighborIndex) -> Result<Tensor<T>> {
    let (batch, channels, n) = check_points(x)?;
    if idx.batch() != batch || idx.n_points() != n {
        return Err(Error::invalid(format!(
            "neighbour index built for ({}, {}) points used with {:?}",
            idx.batch(),
            idx.n_points(),
            x.shape()
        )));
    }
    let k = idx.k();
    let xd = x.data();
    let plane = n * k;
    let mut out = vec![T::zero(); batch * 2 * channels * plane];
    for b in 0..batch {
        let nbrs = &idx.as_slice()[b * plane..(b + 1) * plane];
        for c in 0..channels {
            let xc = &xd[(b * channels + c) * n..(b * channels + c + 1) * n];
            let diff = (b * 2 * channels + c) * plane;
            let abs = (b * 2 * channels + channels + c) * plane;
            for i in 0..n {
                let xi = xc[i];
                for j in 0..k {
                    let p = i * k + j;
                    out[diff + p] = xc[nbrs[p]] - xi;
                    out[abs + p] = xi;
                }
            }
        }
    }
    let nbrs = idx.as_slice().to_vec();
    Ok(Tensor::from_op(
        out,
        vec![batch, 2 * channels, n, k],
        "graph_feature",
        vec![x.clone()],
        move |g, _| {
            let mut gx = vec![T::zero(); batch * channels * n];
            for b in 0..batch {
                let nb = &nbrs[b * plane..(b + 1) * plane];
                for c in 0..channels {
                    let gd = &g[(b * 2 * channels + c) * plane..][..plane];
                    let ga = &g[(b * 2 * channels + channels + c) * plane..][..plane];
                    let dst = &mut gx[(b * channels + c) * n..(b * channels + c + 1) * n];
                    for i in 0..n {
                        let mut own = T::zero();
                        for j in 0..k {
                            let p = i * k + j;
                            dst[nb[p]] = dst[nb[p]] + gd[p];
                            own = own + ga[p] - gd[p];
                        }
                        dst[i] = dst[i] + own;
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}
