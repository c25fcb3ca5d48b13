//! Differentiable primitives. Each forward op has a matching `*_backward`
//! that maps an upstream gradient to input (and parameter) gradients.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Probabilities below this are floored before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Softmax along `axis`, with the slice maximum subtracted first.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let at = |k: usize| base + k * inner;
            let max = (0..extent).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..extent {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..extent {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// In-place row softmax over a contiguous slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Softmax over the last axis of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Given `y = softmax(x)` along the last axis and `dL/dy`, returns `dL/dx`.
pub fn softmax_rows_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let c = y.cols();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), out) in y
        .data()
        .chunks_exact(c)
        .zip(gy.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..c {
            out[k] = yr[k] * (gr[k] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive; zero at the kink.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(gy.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

pub(crate) fn relu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// `relu_backward` expressed against the forward *output*, which is positive exactly where the input was.
pub(crate) fn relu_backward_in_place(out: &Tensor, gy: &mut Tensor) {
    for (g, &y) in gy.data_mut().iter_mut().zip(out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saved state of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim(format!(
            "layer_norm: row width {d}, gamma {}, beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let n = x.rows();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n);
    for (i, row) in x.data().chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormCache {
            normalized: Tensor::from_parts(x.shape().to_vec(), xhat),
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    gy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = vec![0.0; gy.len()];
    let mut gh = vec![0.0; d];
    for (i, (g_row, h_row)) in gy
        .data()
        .chunks_exact(d)
        .zip(cache.normalized.data().chunks_exact(d))
        .enumerate()
    {
        let mut mean_gh = 0.0;
        let mut mean_gh_h = 0.0;
        for j in 0..d {
            dgamma[j] += g_row[j] * h_row[j];
            dbeta[j] += g_row[j];
            gh[j] = g_row[j] * gamma[j];
            mean_gh += gh[j];
            mean_gh_h += gh[j] * h_row[j];
        }
        mean_gh /= d as f64;
        mean_gh_h /= d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = is * (gh[j] - mean_gh - h_row[j] * mean_gh_h);
        }
    }
    (Tensor::from_parts(gy.shape().to_vec(), dx), dgamma, dbeta)
}

/// Inverted dropout. Returns the output and, when anything was dropped, the
/// per-entry multiplier (`0` or `1/(1-rate)`) needed for the backward pass.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    let out = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, m)| v * m)
        .collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), out), Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, gy: &mut Tensor) {
    if let Some(mask) = mask {
        for (g, m) in gy.data_mut().iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Mean over the batch of `-ln(max(p_true, 1e-12))`.
pub fn categorical_cross_entropy(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    if probs.shape() != onehot.shape() {
        return Err(Error::dim(format!(
            "cross-entropy: probs {:?} vs one-hot {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    let c = probs.cols();
    let batch = probs.rows();
    let mut total = 0.0;
    for (i, (p, y)) in probs
        .data()
        .chunks_exact(c)
        .zip(onehot.data().chunks_exact(c))
        .enumerate()
    {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("probability row {i} sums to {s}")));
        }
        let hot: Vec<usize> = (0..c).filter(|&k| y[k] != 0.0).collect();
        if hot.len() != 1 || y[hot[0]] != 1.0 {
            return Err(Error::Validation(format!("one-hot row {i} is not one-hot")));
        }
        total -= p[hot[0]].max(LOG_FLOOR).ln();
    }
    Ok(total / batch as f64)
}

/// Cross-entropy from integer labels; the training loop's fast path.
pub fn cross_entropy_labels(probs: &Tensor, labels: &[usize]) -> f64 {
    let c = probs.cols();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.data()[i * c + y].max(LOG_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// Gradient of mean cross-entropy with respect to the pre-softmax logits: `(p - y) / batch`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let c = probs.cols();
    let inv = 1.0 / labels.len() as f64;
    let mut g = probs.scale(inv);
    for (i, &y) in labels.iter().enumerate() {
        g.data_mut()[i * c + y] -= inv;
    }
    g
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}
