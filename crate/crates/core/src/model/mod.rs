//! Feed-forward classifier over `B×C×L` feature maps.
//!
//! The backbone is a stack of `channel_mix → norm → relu` blocks followed by
//! a mean pool over `L` and a linear head. Only the normalization affine
//! parameters (γ, β) move during adaptation; pretraining updates everything.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cndrm::SampleStats;
use crate::error::{shape_err, Error, Result};
use crate::iobmn::{EmaStats, IobmnState, DEFAULT_ALPHA};
use crate::numerics::{reduce_mean_var, row_entropies, ChannelStats, Tape, Tensor, Var};

/// Epsilon used by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;
/// Weight kept on the running average by the EMA inference statistics.
pub const EMA_DECAY: f64 = 0.9;

/// Where a normalization layer takes its statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    /// The current batch (test-time batch normalization).
    Batch,
    /// Population statistics frozen at the end of pretraining.
    Source,
    /// Memory statistics with soft-shrinkage correction.
    Iobmn,
    /// Exponential moving average of test batches.
    Ema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    ChannelMix,
    Norm,
    Relu,
    GlobalMeanPool,
    ClassifierHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Architecture of the default backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub hidden: usize,
    pub length: usize,
    /// Number of `mix → norm → relu` blocks.
    pub depth: usize,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { in_channels: 16, hidden: 16, length: 8, depth: 3, classes: 3 }
    }
}

impl ModelSpec {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for _ in 0..self.depth {
            out.push(LayerSpec { kind: LayerKind::ChannelMix, in_channels: c, out_channels: self.hidden });
            c = self.hidden;
            out.push(LayerSpec { kind: LayerKind::Norm, in_channels: c, out_channels: c });
            out.push(LayerSpec { kind: LayerKind::Relu, in_channels: c, out_channels: c });
        }
        out.push(LayerSpec { kind: LayerKind::GlobalMeanPool, in_channels: c, out_channels: c });
        out.push(LayerSpec { kind: LayerKind::ClassifierHead, in_channels: c, out_channels: self.classes });
        out
    }
}

/// Normalization layer: affine parameters plus every statistics provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub source_stats: Option<ChannelStats>,
    pub iobmn: IobmnState,
    pub ema: EmaStats,
}

impl NormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: NORM_EPS,
            source_stats: None,
            iobmn: IobmnState::new(DEFAULT_ALPHA).expect("default alpha is valid"),
            ema: EmaStats::new(EMA_DECAY).expect("default decay is valid"),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `out×in` weights, no bias (a normalization always follows).
    ChannelMix {
        weight: Tensor,
    },
    Norm(NormLayer),
    Relu,
    GlobalMeanPool,
    /// `C×K` weights and a length-`K` bias.
    ClassifierHead {
        weight: Tensor,
        bias: Tensor,
    },
}

impl Layer {
    fn spec(&self, prev: usize) -> LayerSpec {
        let (kind, out) = match self {
            Layer::ChannelMix { weight } => (LayerKind::ChannelMix, weight.shape()[0]),
            Layer::Norm(n) => (LayerKind::Norm, n.channels()),
            Layer::Relu => (LayerKind::Relu, prev),
            Layer::GlobalMeanPool => (LayerKind::GlobalMeanPool, prev),
            Layer::ClassifierHead { weight, .. } => (LayerKind::ClassifierHead, weight.shape()[1]),
        };
        let input = match self {
            Layer::ChannelMix { weight } => weight.shape()[1],
            Layer::ClassifierHead { weight, .. } => weight.shape()[0],
            Layer::Norm(n) => n.channels(),
            _ => prev,
        };
        LayerSpec { kind, in_channels: input, out_channels: out }
    }
}

/// Which parameters get trainable tape slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Affine,
    All,
}

/// Identifies a parameter tensor by layer index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    MixWeight(usize),
    Gamma(usize),
    Beta(usize),
    HeadWeight(usize),
    HeadBias(usize),
}

struct Recorded {
    logits: Var,
    params: Vec<(ParamSlot, Var)>,
    early_input: Option<Tensor>,
    layer_stats: Vec<ChannelStats>,
    applied_stats: Vec<ChannelStats>,
}

/// Result of an inference forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pre-softmax `B×K` scores.
    pub logits: Tensor,
    /// Per-sample (mean, std over `L`) of the first normalization input.
    pub early_stats: Vec<SampleStats>,
    /// Live batch statistics of every normalization input.
    pub layer_stats: Vec<ChannelStats>,
    /// Statistics actually used to normalize each layer.
    pub applied_stats: Vec<ChannelStats>,
}

impl ForwardOutput {
    /// Batch statistics of the first normalization input.
    pub fn early_batch_stats(&self) -> Option<&ChannelStats> {
        self.layer_stats.first()
    }
}

/// Gradient of the entropy loss for one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrad {
    pub layer: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Outcome of [`Model::adapt_step`].
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptOutcome {
    /// Nothing to adapt on; parameters untouched.
    Skipped,
    Updated {
        /// Batch statistics of every normalization input on the adapted
        /// samples, observed before the update.
        layer_stats: Vec<ChannelStats>,
        /// Entropy loss before the update.
        loss: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 1e-2, batch_size: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    /// Accuracy on the training data using the frozen source statistics.
    pub source_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
    length: usize,
}

impl Model {
    /// Randomly initialized model (He-normal mixing weights, γ=1, β=0).
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.in_channels == 0 || spec.hidden == 0 || spec.length == 0 || spec.classes < 2 {
            return Err(Error::Domain(format!("degenerate model spec {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for ls in spec.layer_specs() {
            let layer = match ls.kind {
                LayerKind::ChannelMix | LayerKind::ClassifierHead => {
                    let normal = Normal::new(0.0, (2.0 / ls.in_channels as f64).sqrt())
                        .map_err(|e| Error::Domain(e.to_string()))?;
                    let (rows, cols) = if ls.kind == LayerKind::ChannelMix {
                        (ls.out_channels, ls.in_channels)
                    } else {
                        (ls.in_channels, ls.out_channels)
                    };
                    let weight = Tensor::from_fn(&[rows, cols], |_| normal.sample(&mut rng));
                    if ls.kind == LayerKind::ChannelMix {
                        Layer::ChannelMix { weight }
                    } else {
                        Layer::ClassifierHead { weight, bias: Tensor::zeros(&[ls.out_channels]) }
                    }
                }
                LayerKind::Norm => Layer::Norm(NormLayer::new(ls.in_channels)),
                LayerKind::Relu => Layer::Relu,
                LayerKind::GlobalMeanPool => Layer::GlobalMeanPool,
            };
            layers.push(layer);
        }
        Self::from_layers(layers, spec.length)
    }

    /// Validates channel chaining and the single trailing head.
    pub fn from_layers(layers: Vec<Layer>, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::Domain("feature length must be positive".into()));
        }
        let Some(first) = layers.first() else {
            return Err(Error::Domain("model has no layers".into()));
        };
        let mut prev = first.spec(0).in_channels;
        let mut pooled = false;
        for (i, layer) in layers.iter().enumerate() {
            let s = layer.spec(prev);
            if s.in_channels != prev {
                return Err(shape_err!("layer {} expects {} channels but receives {}", i, s.in_channels, prev));
            }
            let last = i + 1 == layers.len();
            match s.kind {
                LayerKind::ClassifierHead if !last => {
                    return Err(Error::Domain("classifier head must be the last layer".into()))
                }
                LayerKind::ClassifierHead if !pooled => {
                    return Err(Error::Domain("classifier head needs a pooled input".into()))
                }
                LayerKind::GlobalMeanPool if pooled => return Err(Error::Domain("pooling twice".into())),
                LayerKind::GlobalMeanPool => pooled = true,
                LayerKind::ChannelMix | LayerKind::Norm if pooled => {
                    return Err(Error::Domain(format!("layer {i} runs after pooling")))
                }
                _ => {}
            }
            if last && s.kind != LayerKind::ClassifierHead {
                return Err(Error::Domain("last layer must be the classifier head".into()));
            }
            if let Layer::Norm(n) = layer {
                if n.beta.len() != n.gamma.len() || !(n.eps > 0.0) {
                    return Err(Error::Domain(format!("malformed norm layer {i}")));
                }
            }
            if let Layer::ClassifierHead { weight, bias } = layer {
                if bias.len() != weight.shape()[1] {
                    return Err(shape_err!("head bias {} vs {} classes", bias.len(), weight.shape()[1]));
                }
            }
            prev = s.out_channels;
        }
        Ok(Self { layers, length })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].spec(0).in_channels
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::ClassifierHead { weight, .. }) => weight.shape()[1],
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn norm_count(&self) -> usize {
        self.norm_layers().count()
    }

    /// Every parameter outside the normalization affines, flattened.
    pub fn frozen_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::ChannelMix { weight } => out.extend_from_slice(weight.data()),
                Layer::ClassifierHead { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias.data());
                }
                _ => {}
            }
        }
        out
    }

    /// All γ then β values of every normalization layer, in layer order.
    pub fn affine_params(&self) -> Vec<f64> {
        self.norm_layers().flat_map(|n| n.gamma.iter().chain(&n.beta).copied()).collect()
    }

    pub fn iobmn_ready(&self) -> bool {
        self.norm_layers().all(|n| n.iobmn.is_populated())
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        for n in self.norm_layers_mut() {
            n.iobmn.set_alpha(alpha)?;
        }
        Ok(())
    }

    /// Stores per-layer memory statistics from `count` adapted samples.
    pub fn populate_iobmn(&mut self, layer_stats: &[ChannelStats], count: usize) -> Result<()> {
        if layer_stats.len() != self.norm_count() {
            return Err(shape_err!("{} stats for {} norm layers", layer_stats.len(), self.norm_count()));
        }
        let length = self.length;
        for (n, s) in self.norm_layers_mut().zip(layer_stats) {
            n.iobmn.populate(s.clone(), length, count)?;
        }
        Ok(())
    }

    /// Folds the statistics applied by an EMA-mode forward into the averages.
    pub fn commit_ema(&mut self, applied: &[ChannelStats]) -> Result<()> {
        if applied.len() != self.norm_count() {
            return Err(shape_err!("{} stats for {} norm layers", applied.len(), self.norm_count()));
        }
        for (n, s) in self.norm_layers_mut().zip(applied) {
            n.ema.commit(s.clone());
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (b, c, l) = x.dims3()?;
        if c != self.in_channels() || l != self.length {
            return Err(shape_err!("model takes B×{}×{} input, got {:?}", self.in_channels(), self.length, x.shape()));
        }
        if b == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        Ok(())
    }

    fn record(&self, tape: &mut Tape, x: &Tensor, source: NormSource, train: Trainable) -> Result<Recorded> {
        self.check_input(x)?;
        let mut params = Vec::new();
        let mut slot = |tape: &mut Tape, t: &Tensor, s: ParamSlot, trainable: bool| {
            if trainable {
                let v = tape.param(t.clone());
                params.push((s, v));
                v
            } else {
                tape.leaf(t.clone())
            }
        };
        let affine = train != Trainable::Nothing;
        let all = train == Trainable::All;

        let mut h = tape.leaf(x.clone());
        let mut early_input = None;
        let mut layer_stats = Vec::new();
        let mut applied_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::ChannelMix { weight } => {
                    let w = slot(tape, weight, ParamSlot::MixWeight(i), all);
                    tape.channel_mix(w, h)?
                }
                Layer::Norm(n) => {
                    let input = tape.value(h)?;
                    let live = ChannelStats::of_feature_map(input)?;
                    if early_input.is_none() {
                        early_input = Some(input.clone());
                    }
                    let (normed, applied) = match source {
                        NormSource::Batch => (tape.batch_norm(h, n.eps)?, live.clone()),
                        NormSource::Source => {
                            let s = n
                                .source_stats
                                .clone()
                                .ok_or_else(|| Error::State(format!("layer {i} has no source statistics")))?;
                            (tape.normalize_fixed(h, &s.mean, &s.var, n.eps)?, s)
                        }
                        NormSource::Iobmn => {
                            let s = n.iobmn.corrected_stats(&live)?;
                            (tape.normalize_fixed(h, &s.mean, &s.var, n.eps)?, s)
                        }
                        NormSource::Ema => {
                            let s = n.ema.blend(&live)?;
                            (tape.normalize_fixed(h, &s.mean, &s.var, n.eps)?, s)
                        }
                    };
                    layer_stats.push(live);
                    applied_stats.push(applied);
                    let c = n.channels();
                    let g = slot(tape, &Tensor::from_parts(vec![c], n.gamma.clone()), ParamSlot::Gamma(i), affine);
                    let b = slot(tape, &Tensor::from_parts(vec![c], n.beta.clone()), ParamSlot::Beta(i), affine);
                    tape.scale_shift(normed, g, b)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::GlobalMeanPool => tape.mean_pool(h)?,
                Layer::ClassifierHead { weight, bias } => {
                    let w = slot(tape, weight, ParamSlot::HeadWeight(i), all);
                    let b = slot(tape, bias, ParamSlot::HeadBias(i), all);
                    let z = tape.matmul(h, w)?;
                    tape.add_row(z, b)?
                }
            };
        }
        Ok(Recorded { logits: h, params, early_input, layer_stats, applied_stats })
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor, source: NormSource) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, source, Trainable::Nothing)?;
        let early_stats = match &rec.early_input {
            Some(t) => per_sample_stats(t)?,
            None => Vec::new(),
        };
        Ok(ForwardOutput {
            logits: tape.value(rec.logits)?.clone(),
            early_stats,
            layer_stats: rec.layer_stats,
            applied_stats: rec.applied_stats,
        })
    }

    /// Mean entropy of `x` under batch statistics and its gradient with
    /// respect to every γ and β.
    pub fn entropy_gradients(&self, x: &Tensor) -> Result<(f64, Vec<AffineGrad>, Vec<ChannelStats>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, NormSource::Batch, Trainable::Affine)?;
        let loss = tape.entropy(rec.logits)?;
        let grads = tape.backward(loss)?;
        let mut out: Vec<AffineGrad> = Vec::new();
        for (slot, var) in &rec.params {
            let g = grads.get(*var).expect("trainable slot").data().to_vec();
            match *slot {
                ParamSlot::Gamma(layer) => out.push(AffineGrad { layer, gamma: g, beta: Vec::new() }),
                ParamSlot::Beta(layer) => {
                    let last = out.last_mut().expect("gamma recorded before beta");
                    debug_assert_eq!(last.layer, layer);
                    last.beta = g;
                }
                _ => unreachable!("only affine slots are trainable"),
            }
        }
        Ok((tape.value(loss)?.item()?, out, rec.layer_stats))
    }

    /// One SGD step on every γ, β minimizing the entropy of `batch` under
    /// batch statistics.
    pub fn adapt_step(&mut self, batch: &Tensor, lr: f64) -> Result<AdaptOutcome> {
        if batch.is_empty() || batch.shape().first() == Some(&0) {
            return Ok(AdaptOutcome::Skipped);
        }
        let (loss, grads, layer_stats) = self.entropy_gradients(batch)?;
        for g in grads {
            let Layer::Norm(n) = &mut self.layers[g.layer] else {
                unreachable!("affine gradient for a non-norm layer")
            };
            n.gamma.iter_mut().zip(&g.gamma).for_each(|(p, d)| *p -= lr * d);
            n.beta.iter_mut().zip(&g.beta).for_each(|(p, d)| *p -= lr * d);
        }
        Ok(AdaptOutcome::Updated { layer_stats, loss })
    }

    fn apply_update(&mut self, slot: ParamSlot, grad: &Tensor, lr: f64) {
        let step = |p: &mut [f64]| p.iter_mut().zip(grad.data()).for_each(|(p, d)| *p -= lr * d);
        match (slot, &mut self.layers[slot_layer(slot)]) {
            (ParamSlot::MixWeight(_), Layer::ChannelMix { weight }) => step(weight.data_mut()),
            (ParamSlot::Gamma(_), Layer::Norm(n)) => step(&mut n.gamma),
            (ParamSlot::Beta(_), Layer::Norm(n)) => step(&mut n.beta),
            (ParamSlot::HeadWeight(_), Layer::ClassifierHead { weight, .. }) => step(weight.data_mut()),
            (ParamSlot::HeadBias(_), Layer::ClassifierHead { bias, .. }) => step(bias.data_mut()),
            _ => unreachable!("slot does not match layer"),
        }
    }

    /// Cross-entropy SGD over all weights on labeled source data, then
    /// freezes population statistics of every normalization input.
    pub fn pretrain(&mut self, inputs: &Tensor, labels: &[usize], cfg: &PretrainConfig) -> Result<PretrainReport> {
        self.check_input(inputs)?;
        let n = inputs.shape()[0];
        if labels.len() != n {
            return Err(shape_err!("{} labels for {} samples", labels.len(), n));
        }
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if cfg.epochs == 0 {
            return Ok(PretrainReport { final_loss: f64::NAN, source_accuracy: f64::NAN });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut final_loss = 0.0;
        for _ in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let rows: Vec<Tensor> = chunk.iter().map(|&i| inputs.row(i)).collect::<Result<_>>()?;
                let xb = Tensor::stack(&rows)?;
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let rec = self.record(&mut tape, &xb, NormSource::Batch, Trainable::All)?;
                let loss = tape.cross_entropy(rec.logits, &yb)?;
                let grads = tape.backward(loss)?;
                total += tape.value(loss)?.item()? * chunk.len() as f64;
                for (slot, var) in &rec.params {
                    let g = grads.get(*var).expect("trainable slot");
                    self.apply_update(*slot, g, cfg.lr);
                }
            }
            final_loss = total / n as f64;
        }
        self.capture_source_stats(inputs)?;
        let source_accuracy = self.accuracy(inputs, labels, NormSource::Source)?;
        Ok(PretrainReport { final_loss, source_accuracy })
    }

    /// Sets every layer's source statistics to the population statistics of
    /// `inputs` forwarded as one batch.
    pub fn capture_source_stats(&mut self, inputs: &Tensor) -> Result<()> {
        let out = self.forward(inputs, NormSource::Batch)?;
        for (n, s) in self.norm_layers_mut().zip(out.layer_stats) {
            n.source_stats = Some(s);
        }
        Ok(())
    }

    pub fn predict(&self, x: &Tensor, source: NormSource) -> Result<Vec<usize>> {
        self.forward(x, source)?.logits.argmax_rows()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize], source: NormSource) -> Result<f64> {
        let pred = self.predict(x, source)?;
        if pred.len() != labels.len() {
            return Err(shape_err!("{} labels for {} samples", labels.len(), pred.len()));
        }
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn to_text(&self) -> String {
        checkpoint::write(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        checkpoint::read(text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn slot_layer(slot: ParamSlot) -> usize {
    match slot {
        ParamSlot::MixWeight(i)
        | ParamSlot::Gamma(i)
        | ParamSlot::Beta(i)
        | ParamSlot::HeadWeight(i)
        | ParamSlot::HeadBias(i) => i,
    }
}

/// Mean entropy (nats) of the softmax of `B×K` logits.
pub fn entropy_loss(logits: &Tensor) -> Result<f64> {
    let (b, _) = logits.dims2()?;
    if b == 0 {
        return Err(Error::Usage("entropy of an empty batch".into()));
    }
    Ok(row_entropies(logits)?.iter().sum::<f64>() / b as f64)
}

/// Per-sample, per-channel mean and population std over `L`.
pub fn per_sample_stats(x: &Tensor) -> Result<Vec<SampleStats>> {
    let (b, c, _) = x.dims3()?;
    let (mean, var) = reduce_mean_var(x, &[2])?;
    Ok((0..b)
        .map(|i| SampleStats {
            mu: mean.data()[i * c..(i + 1) * c].to_vec(),
            sigma: var.data()[i * c..(i + 1) * c].iter().map(|v| v.sqrt()).collect(),
        })
        .collect())
}
