use std::sync::Arc;

use rand::Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::instrument;

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "add",
        vec![a.clone(), b.clone()],
        |g, inputs| {
            let pass = |t: &Tensor<T>| t.requires_grad().then(|| g.to_vec());
            vec![pass(&inputs[0]), pass(&inputs[1])]
        },
    ))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "mul",
        vec![a.clone(), b.clone()],
        |g, inputs| {
            let (a, b) = (&inputs[0], &inputs[1]);
            let times = |other: &Tensor<T>| -> Vec<T> {
                g.iter().zip(other.data()).map(|(&g, &o)| g * o).collect()
            };
            vec![
                a.requires_grad().then(|| times(b)),
                b.requires_grad().then(|| times(a)),
            ]
        },
    ))
}

pub fn scale<T: Element>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * factor).collect();
    Tensor::from_op(data, a.shape().to_vec(), "scale", vec![a.clone()], move |g, _| {
        vec![Some(g.iter().map(|&g| g * factor).collect())]
    })
}

pub fn sum_all<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(vec![total], vec![], "sum_all", vec![a.clone()], move |g, _| {
        vec![Some(vec![g[0]; n])]
    })
}

/// Same buffer under a new shape.
pub fn reshape<T: Element>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let mut out = Tensor {
        data: Arc::clone(&a.data),
        shape: shape.to_vec(),
        node: None,
    };
    if super::grad_enabled() && a.requires_grad() {
        out.node = Some(Arc::new(super::Node::op(
            "reshape",
            vec![a.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )));
    }
    Ok(out)
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input buffer for each output axis
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Element>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
        return Err(Error::invalid(format!(
            "permute: {axes:?} is not a permutation of {rank} axes"
        )));
    }
    let (data, out_shape) = permute_data(a.data(), a.shape(), axes);
    let mut inverse = vec![0; rank];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    let grad_shape = out_shape.clone();
    Ok(Tensor::from_op(data, out_shape, "permute", vec![a.clone()], move |g, _| {
        vec![Some(permute_data(g, &grad_shape, &inverse).0)]
    }))
}

/// Concatenates tensors that agree on every axis except `axis`.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!(
            "concat axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total;

    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    Ok(Tensor::from_op(data, out_shape, "concat", parts.to_vec(), move |g, inputs| {
        let mut offsets = Vec::with_capacity(extents.len());
        let mut acc = 0;
        for &e in &extents {
            offsets.push(acc);
            acc += e;
        }
        inputs
            .iter()
            .zip(extents.iter().zip(&offsets))
            .map(|(input, (&e, &off))| {
                input.requires_grad().then(|| {
                    let mut gi = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let start = (o * total + off) * inner;
                        gi.extend_from_slice(&g[start..start + e * inner]);
                    }
                    gi
                })
            })
            .collect()
    }))
}

fn broadcast_leading(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let get = |s: &[usize], i: usize| {
        let pad = rank - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (get(a, i), get(b, i));
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

/// For each flat index over the broadcast leading shape, the flat index into
/// an operand's own leading shape.
fn leading_map(lead: &[usize], own: &[usize]) -> Vec<usize> {
    let total: usize = lead.iter().product();
    let pad = lead.len() - own.len();
    let own_strides = strides(own);
    let lead_strides = strides(lead);
    (0..total)
        .map(|flat| {
            let mut idx = 0;
            for (d, &ls) in lead_strides.iter().enumerate() {
                let coord = (flat / ls) % lead[d];
                if d >= pad && own[d - pad] != 1 {
                    idx += coord * own_strides[d - pad];
                }
            }
            idx
        })
        .collect()
}

/// Matrix product over the trailing two axes; leading axes broadcast.
pub fn matmul_batched<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, p) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (p2, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if p != p2 {
        return Err(mismatch());
    }
    let a_lead = a.shape()[..ar - 2].to_vec();
    let b_lead = b.shape()[..br - 2].to_vec();
    let lead = broadcast_leading(&a_lead, &b_lead).ok_or_else(mismatch)?;
    let a_map = leading_map(&lead, &a_lead);
    let b_map = leading_map(&lead, &b_lead);
    let batches = a_map.len();

    let mut data = vec![T::zero(); batches * m * n];
    for (l, out) in data.chunks_mut((m * n).max(1)).enumerate().take(batches) {
        let ab = &a.data()[a_map[l] * m * p..(a_map[l] + 1) * m * p];
        let bb = &b.data()[b_map[l] * p * n..(b_map[l] + 1) * p * n];
        T::gemm(m, p, n, T::one(), ab, (p, 1), bb, (n, 1), T::zero(), out, (n, 1));
    }
    instrument::add_macs(batches * m * p * n);

    let mut out_shape = lead;
    out_shape.extend([m, n]);
    Ok(Tensor::from_op(
        data,
        out_shape,
        "matmul",
        vec![a.clone(), b.clone()],
        move |g, inputs| {
            let (a, b) = (&inputs[0], &inputs[1]);
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); a.numel()];
                for l in 0..batches {
                    let gl = &g[l * m * n..(l + 1) * m * n];
                    let bb = &b.data()[b_map[l] * p * n..(b_map[l] + 1) * p * n];
                    let dst = &mut ga[a_map[l] * m * p..(a_map[l] + 1) * m * p];
                    // dA = G B^T
                    T::gemm(m, n, p, T::one(), gl, (n, 1), bb, (1, n), T::one(), dst, (p, 1));
                }
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); b.numel()];
                for l in 0..batches {
                    let gl = &g[l * m * n..(l + 1) * m * n];
                    let ab = &a.data()[a_map[l] * m * p..(a_map[l] + 1) * m * p];
                    let dst = &mut gb[b_map[l] * p * n..(b_map[l] + 1) * p * n];
                    // dB = A^T G
                    T::gemm(p, m, n, T::one(), ab, (1, p), gl, (n, 1), T::one(), dst, (n, 1));
                }
                gb
            });
            vec![ga, gb]
        },
    ))
}

/// Per-position affine map over the channel axis of a `(B, C_in, ...)` input.
///
/// Every trailing position gets `weight · x + bias`; a rank-2 `(B, C_in)`
/// input is a plain fully-connected layer.
pub fn pointwise_linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if input.rank() < 2 || weight.rank() != 2 || weight.shape()[1] != input.shape()[1] {
        return Err(Error::Shape {
            op: "pointwise_linear",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (c_out, c_in) = (weight.shape()[0], weight.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Shape {
                op: "pointwise_linear bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let batch = input.shape()[0];
    let positions: usize = input.shape()[2..].iter().product();
    let mut out_shape = input.shape().to_vec();
    out_shape[1] = c_out;

    let mut data = vec![T::zero(); batch * c_out * positions];
    if let Some(b) = bias {
        for bi in 0..batch {
            for (o, &bv) in b.data().iter().enumerate() {
                let start = (bi * c_out + o) * positions;
                data[start..start + positions].fill(bv);
            }
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for bi in 0..batch {
        let x = &input.data()[bi * c_in * positions..(bi + 1) * c_in * positions];
        let out = &mut data[bi * c_out * positions..(bi + 1) * c_out * positions];
        T::gemm(c_out, c_in, positions, T::one(), weight.data(), (c_in, 1), x, (positions, 1), beta, out, (positions, 1));
    }
    instrument::add_macs(batch * c_out * c_in * positions);

    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(data, out_shape, "pointwise_linear", inputs, move |g, inputs| {
        let (x, w) = (&inputs[0], &inputs[1]);
        let gx = x.requires_grad().then(|| {
            let mut gx = vec![T::zero(); x.numel()];
            for bi in 0..batch {
                let gb = &g[bi * c_out * positions..(bi + 1) * c_out * positions];
                let dst = &mut gx[bi * c_in * positions..(bi + 1) * c_in * positions];
                T::gemm(c_in, c_out, positions, T::one(), w.data(), (1, c_in), gb, (positions, 1), T::zero(), dst, (positions, 1));
            }
            gx
        });
        let gw = w.requires_grad().then(|| {
            let mut gw = vec![T::zero(); c_out * c_in];
            for bi in 0..batch {
                let gb = &g[bi * c_out * positions..(bi + 1) * c_out * positions];
                let xb = &x.data()[bi * c_in * positions..(bi + 1) * c_in * positions];
                T::gemm(c_out, positions, c_in, T::one(), gb, (positions, 1), xb, (1, positions), T::one(), &mut gw, (c_in, 1));
            }
            gw
        });
        let mut grads = vec![gx, gw];
        if let Some(b) = inputs.get(2) {
            grads.push(b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); c_out];
                for (row, slot) in g.chunks(positions.max(1)).zip((0..c_out).cycle()) {
                    gb[slot] = gb[slot] + row.iter().copied().sum();
                }
                gb
            }));
        }
        grads
    }))
}

/// `x` where `x >= 0`, `slope * x` otherwise. The derivative at exactly zero
/// takes the positive branch.
pub fn leaky_relu<T: Element>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    debug_assert!(slope >= T::zero() && slope < T::one());
    let data = input
        .data()
        .iter()
        .map(|&x| if x >= T::zero() { x } else { slope * x })
        .collect();
    Tensor::from_op(data, input.shape().to_vec(), "leaky_relu", vec![input.clone()], move |g, inputs| {
        let x = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x >= T::zero() { g } else { g * slope })
                .collect(),
        )]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
}

fn check_axis<T: Element>(input: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= input.rank() {
        return Err(Error::invalid(format!(
            "reduce axis {axis} out of range for shape {:?}",
            input.shape()
        )));
    }
    if input.shape()[axis] == 0 {
        return Err(Error::invalid(format!(
            "reduce over empty axis {axis} of shape {:?}",
            input.shape()
        )));
    }
    Ok(())
}

/// Max over `axis` plus the winning index of every reduced slice.
/// Ties go to the lowest index.
pub fn reduce_max_with_indices<T: Element>(
    input: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    check_axis(input, axis)?;
    let (outer, len, inner) = split_axis(input.shape(), axis);
    let x = input.data();
    let mut values = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * len * inner;
        if inner == 1 {
            for row in x[base..base + len].chunks(len) {
                let (mut best, mut bi) = (row[0], 0);
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        bi = j;
                    }
                }
                values.push(best);
                arg.push(bi);
            }
        } else {
            let mut best: Vec<T> = x[base..base + inner].to_vec();
            let mut bi = vec![0usize; inner];
            for j in 1..len {
                let row = &x[base + j * inner..base + (j + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    if v > best[i] {
                        best[i] = v;
                        bi[i] = j;
                    }
                }
            }
            values.extend(best);
            arg.extend(bi);
        }
    }
    let mut out_shape = input.shape().to_vec();
    out_shape.remove(axis);
    let winners = arg.clone();
    let numel = input.numel();
    let out = Tensor::from_op(values, out_shape, "reduce_max", vec![input.clone()], move |g, _| {
        let mut gx = vec![T::zero(); numel];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                gx[(o * len + winners[slot]) * inner + i] = g[slot];
            }
        }
        vec![Some(gx)]
    });
    Ok((out, arg))
}

pub fn reduce<T: Element>(input: &Tensor<T>, axis: usize, kind: ReduceKind) -> Result<Tensor<T>> {
    match kind {
        ReduceKind::Max => Ok(reduce_max_with_indices(input, axis)?.0),
        ReduceKind::Mean => {
            check_axis(input, axis)?;
            let (outer, len, inner) = split_axis(input.shape(), axis);
            let inv = T::one() / T::from_usize(len).expect("axis length");
            let x = input.data();
            let mut values = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut values[o * inner..(o + 1) * inner];
                for j in 0..len {
                    let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
            let mut out_shape = input.shape().to_vec();
            out_shape.remove(axis);
            let numel = input.numel();
            Ok(Tensor::from_op(values, out_shape, "reduce_mean", vec![input.clone()], move |g, _| {
                let mut gx = vec![T::zero(); numel];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = gv * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }))
        }
    }
}

fn log_softmax_row<T: Element>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a `(B, K)` tensor. Never recorded in the graph.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::invalid(format!(
            "softmax expects (B, K), got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let mut out = vec![T::zero(); logits.numel()];
    for (row, dst) in logits.data().chunks(k.max(1)).zip(out.chunks_mut(k.max(1))) {
        log_softmax_row(row, dst);
        for v in dst.iter_mut() {
            *v = v.exp();
        }
    }
    Ok(Tensor::raw(out, logits.shape().to_vec()))
}

/// Mean negative log-likelihood of `labels` under a max-shifted softmax.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::invalid(format!(
            "cross entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if batch == 0 {
        return Err(Error::invalid("cross entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut logp = vec![T::zero(); logits.numel()];
    for (row, dst) in logits.data().chunks(classes).zip(logp.chunks_mut(classes)) {
        log_softmax_row(row, dst);
    }
    let inv_b = T::one() / T::from_usize(batch).expect("batch");
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(b, &l)| logp[b * classes + l])
        .sum::<T>()
        * inv_b;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(vec![loss], vec![], "cross_entropy", vec![logits.clone()], move |g, _| {
        let scale = g[0] * inv_b;
        let mut gx: Vec<T> = logp.iter().map(|&lp| lp.exp() * scale).collect();
        for (b, &l) in labels.iter().enumerate() {
            gx[b * classes + l] = gx[b * classes + l] - scale;
        }
        vec![Some(gx)]
    }))
}

/// Inverted dropout: zeroes each element with probability `p` and rescales
/// survivors by `1 / (1 - p)`.
pub fn dropout<T: Element, R: Rng + ?Sized>(input: &Tensor<T>, p: f64, rng: &mut R) -> Tensor<T> {
    if p <= 0.0 {
        return input.clone();
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.numel())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::from_op(data, input.shape().to_vec(), "dropout", vec![input.clone()], move |g, _| {
        vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]
    })
}
