//! Streaming loop: inference, memory upkeep, centroid tracking and sparse
//! adaptation.
//!
//! Per batch, in order:
//!
//! 1. forward with the configured inference statistics (IoBMN falls back to
//!    batch statistics until the first adaptation populates it);
//! 2. every sample is scored against the current centroid and offered to
//!    the memory in index order;
//! 3. the centroid absorbs the batch's early-layer statistics and stored
//!    distances are refreshed if it moved far enough;
//! 4. if the schedule fires, one entropy step runs on the memory and the
//!    IoBMN statistics are replaced by those of the adapted samples.
//!
//! Adaptation happens after inference, so a batch never benefits from its
//! own update. Evaluation labels feed metrics only.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cndrm::{
    confidence, Memory, MemoryConfig, MemorySample, SelectionMode, DEFAULT_CENTROID_MOMENTUM, DEFAULT_TAU_CONF,
    DEFAULT_TAU_DELTA,
};
use crate::datagen::Batch;
use crate::error::{shape_err, Error, Result};
use crate::iobmn::DEFAULT_ALPHA;
use crate::model::{AdaptOutcome, Model, NormSource};
use crate::numerics::{row_entropies, softmax, Tensor};

const CHECKPOINT_VERSION: u32 = 1;

/// Fires on a fixed fraction of batches.
///
/// The rate is held as an exact fraction `num/den` and the credit as an
/// integer, so after `n` calls exactly `floor(n·num/den)` have fired.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationSchedule {
    num: u64,
    den: u64,
    credit: u64,
    adapt_count: u64,
    batch_count: u64,
}

/// Largest denominator used when turning a rate into a fraction.
const MAX_DEN: u64 = 1_000_000;

/// Best rational approximation with denominator at most `MAX_DEN`
/// (continued-fraction convergents).
fn to_fraction(x: f64) -> (u64, u64) {
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut rest = x;
    loop {
        let a = rest.floor();
        let ai = a as u64;
        let (h2, k2) = (ai * h1 + h0, ai * k1 + k0);
        if k2 > MAX_DEN {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = rest - a;
        if frac < 1e-12 || ((h1 as f64 / k1 as f64) - x).abs() < 1e-15 {
            break;
        }
        rest = 1.0 / frac;
    }
    (h1, k1)
}

impl AdaptationSchedule {
    /// `ar` in `[0, 1]`; zero never fires.
    pub fn new(ar: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ar) {
            return Err(Error::Domain(format!("adaptation rate {ar} must be in [0, 1]")));
        }
        let (num, den) = if ar == 0.0 { (0, 1) } else { to_fraction(ar) };
        Ok(Self { num, den, credit: 0, adapt_count: 0, batch_count: 0 })
    }

    pub fn rate(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Fractional credit carried to the next batch, in `[0, 1)`.
    pub fn credit(&self) -> f64 {
        self.credit as f64 / self.den as f64
    }

    pub fn adapt_count(&self) -> u64 {
        self.adapt_count
    }

    pub fn batch_count(&self) -> u64 {
        self.batch_count
    }

    /// Call exactly once per batch.
    pub fn should_adapt(&mut self) -> bool {
        self.batch_count += 1;
        self.credit += self.num;
        if self.credit >= self.den {
            self.credit -= self.den;
            self.adapt_count += 1;
            true
        } else {
            false
        }
    }
}

/// Which statistics normalization layers use at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceStats {
    Iobmn,
    Ema,
    Batch,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub ar: f64,
    pub tau_conf: f64,
    pub tau_delta: f64,
    pub alpha: f64,
    /// Weight of the newest batch in the centroid update.
    pub beta_centroid: f64,
    pub lr: f64,
    /// Memory capacity; `None` uses the batch size.
    pub capacity: Option<usize>,
    pub selection_mode: SelectionMode,
    pub inference_stats: InferenceStats,
    pub seed: u64,
    /// Recompute IoBMN memory statistics from the current memory on every
    /// batch instead of freezing them at the last adaptation.
    pub refresh_memory_stats: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            ar: 0.1,
            tau_conf: DEFAULT_TAU_CONF,
            tau_delta: DEFAULT_TAU_DELTA,
            alpha: DEFAULT_ALPHA,
            beta_centroid: DEFAULT_CENTROID_MOMENTUM,
            lr: 1e-3,
            capacity: None,
            selection_mode: SelectionMode::Cndrm,
            inference_stats: InferenceStats::Iobmn,
            seed: 0,
            refresh_memory_stats: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ar) {
            return Err(Error::Domain(format!("ar {} must be in [0, 1]", self.ar)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Domain(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(self.beta_centroid > 0.0 && self.beta_centroid <= 1.0) {
            return Err(Error::Domain(format!("beta_centroid {} must be in (0, 1]", self.beta_centroid)));
        }
        if !self.tau_conf.is_finite() || !(self.tau_delta >= 0.0) {
            return Err(Error::Domain("tau_conf must be finite and tau_delta >= 0".into()));
        }
        if self.capacity == Some(0) {
            return Err(Error::Domain("memory capacity must be positive".into()));
        }
        Ok(())
    }
}

/// What happened on one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: u64,
    pub segment: usize,
    pub batch_size: usize,
    /// `None` when the batch carried no evaluation labels.
    pub correct: Option<usize>,
    pub adapted: bool,
    /// The schedule fired but the memory was empty.
    pub skipped: bool,
    /// Entropy loss on the memory before the update.
    pub adapt_loss: Option<f64>,
    pub mean_confidence: f64,
    pub memory_len: usize,
    pub memory_label_accuracy: Option<f64>,
    /// Distance between the centroid and this batch's early statistics,
    /// after the centroid update.
    pub centroid_gap: f64,
    pub timing: BatchTiming,
}

/// Wall-clock split of one batch, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchTiming {
    pub inference_secs: f64,
    pub adapt_secs: f64,
}

impl BatchRecord {
    /// The record with timings zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        Self { timing: BatchTiming::default(), ..self.clone() }
    }
}

/// Summary over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<BatchRecord>,
}

impl RunMetrics {
    pub fn push(&mut self, r: BatchRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
    }

    pub fn batches(&self) -> usize {
        self.records.len()
    }

    pub fn adapt_count(&self) -> usize {
        self.records.iter().filter(|r| r.adapted).count()
    }

    pub fn skipped_count(&self) -> usize {
        self.records.iter().filter(|r| r.skipped).count()
    }

    fn labeled(&self) -> impl Iterator<Item = (&BatchRecord, usize)> {
        self.records.iter().filter_map(|r| r.correct.map(|c| (r, c)))
    }

    /// Overall accuracy over labeled batches.
    pub fn accuracy(&self) -> Option<f64> {
        let (hits, total) = self.labeled().fold((0, 0), |(h, t), (r, c)| (h + c, t + r.batch_size));
        (total > 0).then(|| hits as f64 / total as f64)
    }

    pub fn segment_accuracies(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (r, c) in self.labeled() {
            let e = acc.entry(r.segment).or_insert((0, 0));
            e.0 += c;
            e.1 += r.batch_size;
        }
        acc.into_iter().map(|(s, (h, t))| (s, h as f64 / t as f64)).collect()
    }

    /// Mean memory pseudo-label accuracy over batches where it is defined.
    pub fn mean_memory_label_accuracy(&self) -> Option<f64> {
        let vals: Vec<f64> = self.records.iter().filter_map(|r| r.memory_label_accuracy).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_memory_len(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.memory_len as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn total_inference_secs(&self) -> f64 {
        self.records.iter().map(|r| r.timing.inference_secs).sum()
    }

    pub fn total_adapt_secs(&self) -> f64 {
        self.records.iter().map(|r| r.timing.adapt_secs).sum()
    }

    /// Adaptation wall-time over total wall-time.
    pub fn adapt_time_share(&self) -> f64 {
        let total = self.total_inference_secs() + self.total_adapt_secs();
        if total > 0.0 {
            self.total_adapt_secs() / total
        } else {
            0.0
        }
    }

    /// Mean per-batch latency over batches that adapted and those that did
    /// not.
    pub fn mean_latency(&self) -> (Option<f64>, Option<f64>) {
        let mean = |adapted: bool| {
            let v: Vec<f64> = self
                .records
                .iter()
                .filter(|r| r.adapted == adapted)
                .map(|r| r.timing.inference_secs + r.timing.adapt_secs)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        (mean(true), mean(false))
    }

    /// Records with timings zeroed.
    pub fn without_timing(&self) -> Self {
        Self { records: self.records.iter().map(BatchRecord::without_timing).collect() }
    }
}

pub struct Engine {
    config: EngineConfig,
    model: Model,
    memory: Memory,
    schedule: AdaptationSchedule,
    batches_seen: u64,
}

/// Serialized engine state for pause/resume.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: EngineConfig,
    model: String,
    memory: Memory,
    schedule: AdaptationSchedule,
    batches_seen: u64,
}

impl Engine {
    /// `batch_size` fixes the memory capacity when the config leaves it
    /// unset.
    pub fn new(model: Model, config: EngineConfig, batch_size: usize) -> Result<Self> {
        config.validate()?;
        let capacity = config.capacity.unwrap_or(batch_size);
        let memory = Memory::new(MemoryConfig {
            capacity,
            tau_conf: config.tau_conf,
            tau_delta: config.tau_delta,
            centroid_momentum: config.beta_centroid,
            mode: config.selection_mode,
            seed: config.seed,
        })?;
        let mut model = model;
        model.set_alpha(config.alpha)?;
        let schedule = AdaptationSchedule::new(config.ar)?;
        Ok(Self { config, model, memory, schedule, batches_seen: 0 })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn schedule(&self) -> &AdaptationSchedule {
        &self.schedule
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    fn norm_source(&self) -> NormSource {
        match self.config.inference_stats {
            InferenceStats::Iobmn if self.model.iobmn_ready() => NormSource::Iobmn,
            InferenceStats::Iobmn | InferenceStats::Batch => NormSource::Batch,
            InferenceStats::Ema => NormSource::Ema,
            InferenceStats::Source => NormSource::Source,
        }
    }

    fn populate_iobmn(&mut self, layer_stats: &[crate::numerics::ChannelStats], count: usize) -> Result<()> {
        // L·M = 1 has no defined sampling variance; keep the old statistics.
        if self.model.length() * count >= 2 {
            self.model.populate_iobmn(layer_stats, count)?;
        }
        Ok(())
    }

    /// Processes one `B×C×L` batch; `labels` only feed the record.
    pub fn process_batch(&mut self, x: &Tensor, labels: Option<&[usize]>, segment: usize) -> Result<BatchRecord> {
        let start = Instant::now();
        let (b, _, _) = x.dims3()?;
        if b == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        if let Some(l) = labels {
            if l.len() != b {
                return Err(shape_err!("{} labels for a batch of {b}", l.len()));
            }
        }
        let source = self.norm_source();
        let out = self.model.forward(x, source)?;
        if out.logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite logits at batch {}; the model has diverged",
                self.batches_seen
            )));
        }
        let probs = softmax(&out.logits)?;
        let preds = out.logits.argmax_rows()?;
        let entropies = row_entropies(&out.logits)?;
        let k = self.model.classes();
        let confs: Vec<f64> = (0..b).map(|i| confidence(&probs.data()[i * k..(i + 1) * k])).collect();

        for i in 0..b {
            let stats = out.early_stats[i].clone();
            let wdist = self.memory.score(&stats)?;
            self.memory.insert(MemorySample {
                input: x.row(i)?,
                pseudo_label: preds[i],
                confidence: confs[i],
                stats,
                wdist,
                entropy: entropies[i],
                arrival_index: 0,
                eval_label: labels.map(|l| l[i]),
            });
        }
        let early = out.early_batch_stats().ok_or_else(|| Error::State("model has no normalization layer".into()))?;
        let shift = self.memory.update_centroid(early)?;
        self.memory.maybe_rescore(shift)?;
        let c = self.memory.centroid();
        let early_sigma: Vec<f64> = early.var.iter().map(|v| v.sqrt()).collect();
        let centroid_gap = crate::cndrm::wasserstein(c.mu(), c.sigma(), &early.mean, &early_sigma)?;

        if source == NormSource::Ema {
            self.model.commit_ema(&out.applied_stats)?;
        }
        if self.config.refresh_memory_stats && self.config.inference_stats == InferenceStats::Iobmn {
            if let Some(mb) = self.memory.batch() {
                let stats = self.model.forward(&mb, NormSource::Batch)?.layer_stats;
                self.populate_iobmn(&stats, self.memory.len())?;
            }
        }
        let inference_secs = start.elapsed().as_secs_f64();

        let adapt_start = Instant::now();
        let (mut adapted, mut skipped, mut adapt_loss) = (false, false, None);
        if self.schedule.should_adapt() {
            match self.memory.batch() {
                None => skipped = true,
                Some(mb) => match self.model.adapt_step(&mb, self.config.lr)? {
                    AdaptOutcome::Skipped => skipped = true,
                    AdaptOutcome::Updated { layer_stats, loss } => {
                        if self.model.affine_params().iter().any(|v| !v.is_finite()) {
                            return Err(Error::Data(format!(
                                "non-finite affine parameters after adapting at batch {}",
                                self.batches_seen
                            )));
                        }
                        adapted = true;
                        adapt_loss = Some(loss);
                        self.populate_iobmn(&layer_stats, self.memory.len())?;
                    }
                },
            }
        }
        let adapt_secs = if adapted { adapt_start.elapsed().as_secs_f64() } else { 0.0 };

        let correct = labels.map(|l| preds.iter().zip(l).filter(|(p, y)| p == y).count());
        let record = BatchRecord {
            index: self.batches_seen,
            segment,
            batch_size: b,
            correct,
            adapted,
            skipped,
            adapt_loss,
            mean_confidence: confs.iter().sum::<f64>() / b as f64,
            memory_len: self.memory.len(),
            memory_label_accuracy: self.memory.pseudo_label_accuracy(),
            centroid_gap,
            timing: BatchTiming { inference_secs, adapt_secs },
        };
        self.batches_seen += 1;
        Ok(record)
    }

    /// Folds [`Engine::process_batch`] over a stream.
    pub fn run_stream(&mut self, stream: impl IntoIterator<Item = Batch>) -> Result<RunMetrics> {
        let mut metrics = RunMetrics::default();
        for batch in stream {
            metrics.push(self.process_batch(&batch.inputs, Some(&batch.labels), batch.segment)?);
        }
        Ok(metrics)
    }

    /// Serializes the full engine state as JSON.
    pub fn checkpoint(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.to_text(),
            memory: self.memory.clone(),
            schedule: self.schedule.clone(),
            batches_seen: self.batches_seen,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn restore(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported engine checkpoint version {}", ck.version)));
        }
        ck.config.validate()?;
        Ok(Self {
            config: ck.config,
            model: Model::from_text(&ck.model)?,
            memory: ck.memory,
            schedule: ck.schedule,
            batches_seen: ck.batches_seen,
        })
    }
}
