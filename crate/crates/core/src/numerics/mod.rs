//! Dense tensor kernels and a small reverse-mode tape.
//!
//! Everything runs in `f64`. The kernels here are shared by the tape
//! ([`Tape`]) and by the inference-only paths so both produce the same bits.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Standard `M×K · K×N` product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul inner extents {} and {}", k, k2));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Transpose of a matrix.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// Mean and population variance over `axes`, keeping the remaining axes in
/// order. Elements are accumulated in flat (row-major) order.
pub fn reduce_mean_var(x: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    let shape = x.shape();
    if axes.is_empty() {
        return Err(Error::Domain("empty reduction axis set".into()));
    }
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(shape_err!("axis {} out of range for {:?}", a, shape));
        }
        if reduced[a] {
            return Err(shape_err!("axis {} repeated", a));
        }
        reduced[a] = true;
    }
    let count: usize = shape.iter().zip(&reduced).filter(|(_, r)| **r).map(|(e, _)| *e).product();
    if count == 0 {
        return Err(Error::Domain("reduction over zero elements".into()));
    }
    let out_shape: Vec<usize> = shape.iter().zip(&reduced).filter(|(_, r)| !**r).map(|(e, _)| *e).collect();
    let out_len: usize = out_shape.iter().product();

    // Map every flat input index to its output slot.
    let mut slot = Vec::with_capacity(x.len());
    let mut index = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        let mut o = 0;
        for (d, &i) in index.iter().enumerate() {
            if !reduced[d] {
                o = o * shape[d] + i;
            }
        }
        slot.push(o);
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }

    let n = count as f64;
    let mut mean = vec![0.0; out_len];
    for (&s, &v) in slot.iter().zip(x.data()) {
        mean[s] += v;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; out_len];
    for (&s, &v) in slot.iter().zip(x.data()) {
        let d = v - mean[s];
        var[s] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok((Tensor::from_parts(out_shape.clone(), mean), Tensor::from_parts(out_shape, var)))
}

/// Softmax along the last axis with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = *logits.shape().last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
    if k == 0 {
        return Err(shape_err!("softmax over an empty axis"));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Row-wise log-softmax; finite even where the softmax underflows.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let k = *logits.shape().last().ok_or_else(|| shape_err!("log_softmax on a scalar"))?;
    if k == 0 {
        return Err(shape_err!("log_softmax over an empty axis"));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v = *v - max - lse);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Per-row entropy `-Σ p log p` in nats.
pub fn row_entropies(logits: &Tensor) -> Result<Vec<f64>> {
    let k = *logits.shape().last().unwrap_or(&0);
    let logp = log_softmax(logits)?;
    Ok(logp.data().chunks(k).map(|row| -row.iter().map(|&lp| lp.exp() * lp).sum::<f64>()).collect())
}

/// Per-channel mean and variance of a feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(shape_err!("{} means vs {} variances", mean.len(), var.len()));
        }
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite channel statistic".into()));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("negative variance".into()));
        }
        Ok(Self { mean, var })
    }

    /// Batch statistics of a `B×C×L` map: population moments over `B×L`.
    pub fn of_feature_map(x: &Tensor) -> Result<Self> {
        x.dims3()?;
        let (mean, var) = reduce_mean_var(x, &[0, 2])?;
        Ok(Self { mean: mean.into_data(), var: var.into_data() })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

/// `(x - mean_c) / sqrt(var_c + eps)` for every element of a `B×C×L` map.
pub fn normalize_channels(x: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Result<Tensor> {
    let (_, c, l) = x.dims3()?;
    if mean.len() != c || var.len() != c {
        return Err(shape_err!("{} channels vs stats for {}", c, mean.len()));
    }
    let denom: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i / l) % c;
        *v = (*v - mean[ch]) / denom[ch];
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `gamma_c * x + beta_c` for every element of a `B×C×L` map.
pub fn scale_shift_channels(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (_, c, l) = x.dims3()?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!("{} channels vs affine of {}", c, gamma.len()));
    }
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i / l) % c;
        *v = gamma[ch] * *v + beta[ch];
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
