//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output and whatever it needs for the
//! backward pass. [`Tape::backward`] walks the list in exact reverse order,
//! accumulating gradients additively, and hands back gradients only for the
//! nodes registered with [`Tape::param`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{log_softmax, matmul, normalize_channels, softmax, transpose, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    ChannelMix { weight: usize, input: usize },
    BatchNorm { input: usize, xhat: Tensor, inv_std: Vec<f64> },
    NormalizeFixed { input: usize, inv_std: Vec<f64> },
    ScaleShift { input: usize, gamma: usize, beta: usize },
    Relu(usize),
    MeanPool(usize),
    AddRow { input: usize, bias: usize },
    Softmax(usize),
    Mul(usize, usize),
    Sum(usize),
    Entropy { logits: usize, logp: Tensor, per_row: Vec<f64> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for the trainable slots of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable slot; `None` for non-trainable nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable slot.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> Var {
        self.nodes.push(Node { value, op, trainable });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(var.index)
    }

    fn val(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib), false))
    }

    /// 1×1 channel mixing: `y[b,o,l] = Σ_i w[o,i] x[b,i,l]`.
    pub fn channel_mix(&mut self, weight: Var, input: Var) -> Result<Var> {
        let (iw, ix) = (self.check(weight)?, self.check(input)?);
        let (co, ci) = self.val(iw).dims2()?;
        let (b, c, l) = self.val(ix).dims3()?;
        if c != ci {
            return Err(shape_err!("channel_mix expects {} input channels, got {}", ci, c));
        }
        let (w, x) = (self.val(iw).data(), self.val(ix).data());
        let mut out = vec![0.0; b * co * l];
        for bi in 0..b {
            for o in 0..co {
                let dst = &mut out[(bi * co + o) * l..(bi * co + o + 1) * l];
                for i in 0..ci {
                    let wv = w[o * ci + i];
                    let src = &x[(bi * ci + i) * l..(bi * ci + i + 1) * l];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, co, l], out);
        Ok(self.push(out, Op::ChannelMix { weight: iw, input: ix }, false))
    }

    /// Normalization with the input's own batch statistics; gradients flow
    /// through the mean and variance.
    pub fn batch_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let ix = self.check(input)?;
        let stats = super::ChannelStats::of_feature_map(self.val(ix))?;
        let xhat = normalize_channels(self.val(ix), &stats.mean, &stats.var, eps)?;
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let value = xhat.clone();
        Ok(self.push(value, Op::BatchNorm { input: ix, xhat, inv_std }, false))
    }

    /// Normalization with externally supplied statistics, treated as
    /// constants.
    pub fn normalize_fixed(&mut self, input: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let ix = self.check(input)?;
        let out = normalize_channels(self.val(ix), mean, var, eps)?;
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.push(out, Op::NormalizeFixed { input: ix, inv_std }, false))
    }

    pub fn scale_shift(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let out = super::scale_shift_channels(self.val(ix), self.val(ig).data(), self.val(ib).data())?;
        Ok(self.push(out, Op::ScaleShift { input: ix, gamma: ig, beta: ib }, false))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let ix = self.check(input)?;
        let out = self.val(ix).map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(ix), false))
    }

    /// Mean over the trailing `L` axis: `B×C×L → B×C`.
    pub fn mean_pool(&mut self, input: Var) -> Result<Var> {
        let ix = self.check(input)?;
        let (b, c, l) = self.val(ix).dims3()?;
        let data = self.val(ix).data().chunks(l).map(|ch| ch.iter().sum::<f64>() / l as f64).collect();
        Ok(self.push(Tensor::from_parts(vec![b, c], data), Op::MeanPool(ix), false))
    }

    /// Adds a length-`K` bias to every row of a `B×K` matrix.
    pub fn add_row(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(input)?, self.check(bias)?);
        let (_, k) = self.val(ix).dims2()?;
        let bias_v = self.val(ib).data();
        if bias_v.len() != k {
            return Err(shape_err!("bias of {} for {} columns", bias_v.len(), k));
        }
        let mut out = self.val(ix).data().to_vec();
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(bias_v).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::from_parts(self.val(ix).shape().to_vec(), out);
        Ok(self.push(out, Op::AddRow { input: ix, bias: ib }, false))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let ix = self.check(input)?;
        let out = softmax(self.val(ix))?;
        Ok(self.push(out, Op::Softmax(ix), false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        if va.shape() != vb.shape() {
            return Err(shape_err!("mul {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(ia, ib), false))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ix = self.check(input)?;
        let out = Tensor::scalar(self.val(ix).sum());
        Ok(self.push(out, Op::Sum(ix), false))
    }

    /// Mean over rows of the softmax entropy of `B×K` logits.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let il = self.check(logits)?;
        let (b, k) = self.val(il).dims2()?;
        if b == 0 || k == 0 {
            return Err(shape_err!("entropy of an empty batch"));
        }
        let logp = log_softmax(self.val(il))?;
        let per_row: Vec<f64> =
            logp.data().chunks(k).map(|row| -row.iter().map(|&lp| lp.exp() * lp).sum::<f64>()).collect();
        let loss = per_row.iter().sum::<f64>() / b as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Entropy { logits: il, logp, per_row }, false))
    }

    /// Mean cross-entropy of `B×K` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (b, k) = self.val(il).dims2()?;
        if labels.len() != b || b == 0 {
            return Err(shape_err!("{} labels for {} rows", labels.len(), b));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {} out of range for {} classes", bad, k)));
        }
        let logp = log_softmax(self.val(il))?;
        let loss = -labels.iter().enumerate().map(|(i, &y)| logp.data()[i * k + y]).sum::<f64>() / b as f64;
        let probs = logp.map(f64::exp);
        let op = Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, false))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.val(il).len() != 1 {
            return Err(Error::Usage(format!("loss must be a scalar, got shape {:?}", self.val(il).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::from_parts(self.val(il).shape().to_vec(), vec![1.0]));

        for idx in (0..=il).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| node.trainable.then(|| g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = matmul(g, &transpose(self.val(*b))?)?;
                let gb = matmul(&transpose(self.val(*a))?, g)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ChannelMix { weight, input } => {
                let (co, ci) = self.val(*weight).dims2()?;
                let (b, _, l) = self.val(*input).dims3()?;
                let (w, x) = (self.val(*weight).data(), self.val(*input).data());
                let mut gw = vec![0.0; co * ci];
                let mut gx = vec![0.0; b * ci * l];
                for bi in 0..b {
                    for o in 0..co {
                        let go = &gd[(bi * co + o) * l..(bi * co + o + 1) * l];
                        for i in 0..ci {
                            let xi = &x[(bi * ci + i) * l..(bi * ci + i + 1) * l];
                            gw[o * ci + i] += go.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                            let wv = w[o * ci + i];
                            let dst = &mut gx[(bi * ci + i) * l..(bi * ci + i + 1) * l];
                            dst.iter_mut().zip(go).for_each(|(d, gv)| *d += wv * gv);
                        }
                    }
                }
                accumulate(grads, *weight, Tensor::from_parts(vec![co, ci], gw));
                accumulate(grads, *input, Tensor::from_parts(vec![b, ci, l], gx));
            }
            Op::BatchNorm { input, xhat, inv_std } => {
                let (b, c, l) = xhat.dims3()?;
                let n = (b * l) as f64;
                let xh = xhat.data();
                let mut mean_g = vec![0.0; c];
                let mut mean_gx = vec![0.0; c];
                for (i, (&gv, &xv)) in gd.iter().zip(xh).enumerate() {
                    let ch = (i / l) % c;
                    mean_g[ch] += gv;
                    mean_gx[ch] += gv * xv;
                }
                mean_g.iter_mut().for_each(|v| *v /= n);
                mean_gx.iter_mut().for_each(|v| *v /= n);
                let gx = gd
                    .iter()
                    .zip(xh)
                    .enumerate()
                    .map(|(i, (&gv, &xv))| {
                        let ch = (i / l) % c;
                        inv_std[ch] * (gv - mean_g[ch] - xv * mean_gx[ch])
                    })
                    .collect();
                accumulate(grads, *input, Tensor::from_parts(vec![b, c, l], gx));
            }
            Op::NormalizeFixed { input, inv_std } => {
                let (_, c, l) = g.dims3()?;
                let gx = gd.iter().enumerate().map(|(i, &gv)| gv * inv_std[(i / l) % c]).collect();
                accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::ScaleShift { input, gamma, beta } => {
                let (_, c, l) = g.dims3()?;
                let x = self.val(*input).data();
                let gam = self.val(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = Vec::with_capacity(gd.len());
                for (i, (&gv, &xv)) in gd.iter().zip(x).enumerate() {
                    let ch = (i / l) % c;
                    gg[ch] += gv * xv;
                    gb[ch] += gv;
                    gx.push(gam[ch] * gv);
                }
                accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), gx));
                accumulate(grads, *gamma, Tensor::from_parts(vec![c], gg));
                accumulate(grads, *beta, Tensor::from_parts(vec![c], gb));
            }
            Op::Relu(input) => {
                let x = self.val(*input).data();
                let gx = gd.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::MeanPool(input) => {
                let shape = self.val(*input).shape().to_vec();
                let l = shape[2];
                let gx = gd.iter().flat_map(|&gv| std::iter::repeat_n(gv / l as f64, l)).collect();
                accumulate(grads, *input, Tensor::from_parts(shape, gx));
            }
            Op::AddRow { input, bias } => {
                let (_, k) = g.dims2()?;
                let mut gb = vec![0.0; k];
                for row in gd.chunks(k) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *input, g.clone());
                accumulate(grads, *bias, Tensor::from_parts(vec![k], gb));
            }
            Op::Softmax(input) => {
                let k = *g.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(k).zip(y.chunks(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gv, yv)| yv * (gv - dot)));
                }
                accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let ga = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                let shape = g.shape().to_vec();
                accumulate(grads, *a, Tensor::from_parts(shape.clone(), ga));
                accumulate(grads, *b, Tensor::from_parts(shape, gb));
            }
            Op::Sum(input) => {
                let shape = self.val(*input).shape();
                accumulate(grads, *input, Tensor::filled(shape, gd[0]));
            }
            Op::Entropy { logits, logp, per_row } => {
                let (b, k) = logp.dims2()?;
                let scale = gd[0] / b as f64;
                let mut gx = Vec::with_capacity(b * k);
                for (row, &h) in logp.data().chunks(k).zip(per_row) {
                    gx.extend(row.iter().map(|&lp| -scale * lp.exp() * (lp + h)));
                }
                accumulate(grads, *logits, Tensor::from_parts(vec![b, k], gx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (b, k) = probs.dims2()?;
                let scale = gd[0] / b as f64;
                let mut gx: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * k + y] -= scale;
                }
                accumulate(grads, *logits, Tensor::from_parts(vec![b, k], gx));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) {
    match &mut grads[index] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
