//! Class- and domain-representative memory.
//!
//! Each incoming sample carries a pseudo-label, a softmax confidence and the
//! per-channel (mean, std) of its early-layer features. The memory keeps at
//! most `capacity` confident samples; on overflow it evicts, from the most
//! populous pseudo-class, the sample farthest from a momentum-tracked domain
//! centroid. Distances use the diagonal-Gaussian 2-Wasserstein closed form
//!
//! ```text
//! W(a, b) = sqrt( Σ_c (μ_a,c − μ_b,c)² + (σ_a,c − σ_b,c)² )
//! ```
//!
//! Stored distances are refreshed only when the centroid itself moves by
//! more than `tau_delta`.
//!
//! The simpler selection policies used for ablations (FIFO, random,
//! low-entropy, confidence + class balance without distances) share the
//! same container via [`SelectionMode`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ChannelStats, Tensor};

pub const DEFAULT_TAU_CONF: f64 = 0.5;
pub const DEFAULT_TAU_DELTA: f64 = 0.1;
pub const DEFAULT_CENTROID_MOMENTUM: f64 = 0.9;

/// Per-channel feature mean and standard deviation of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SampleStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(shape_err!("{} means vs {} deviations", mu.len(), sigma.len()));
        }
        if sigma.iter().any(|&s| !(s >= 0.0)) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("sample statistics must be finite, sigma >= 0".into()));
        }
        Ok(Self { mu, sigma })
    }
}

/// Max softmax probability.
pub fn confidence(probabilities: &[f64]) -> f64 {
    probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Diagonal-Gaussian 2-Wasserstein distance between two (μ, σ) sets.
pub fn wasserstein(mu_a: &[f64], sigma_a: &[f64], mu_b: &[f64], sigma_b: &[f64]) -> Result<f64> {
    let c = mu_a.len();
    if sigma_a.len() != c || mu_b.len() != c || sigma_b.len() != c {
        return Err(shape_err!("channel counts {}/{} vs {}/{}", mu_a.len(), sigma_a.len(), mu_b.len(), sigma_b.len()));
    }
    let mut total = 0.0;
    for i in 0..c {
        let dm = mu_a[i] - mu_b[i];
        let ds = sigma_a[i] - sigma_b[i];
        total += dm * dm + ds * ds;
    }
    Ok(total.sqrt())
}

/// Momentum-tracked per-channel (μ, σ) of early-layer batch statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCentroid {
    mu: Vec<f64>,
    var: Vec<f64>,
    sigma: Vec<f64>,
    momentum: f64,
    initialized: bool,
}

impl DomainCentroid {
    /// `momentum` is the weight given to the newest batch.
    pub fn new(momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Domain(format!("centroid momentum {momentum} must be in (0, 1]")));
        }
        Ok(Self { mu: Vec::new(), var: Vec::new(), sigma: Vec::new(), momentum, initialized: false })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Blends in a batch: `μ ← (1−β)μ + βμ_t`, `σ² ← (1−β)σ² + βσ²_t`.
    /// Returns how far the centroid moved; the first batch returns `+∞`.
    pub fn update(&mut self, batch: &ChannelStats) -> Result<f64> {
        if batch.mean.iter().chain(&batch.var).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite batch statistics".into()));
        }
        if !self.initialized {
            self.mu = batch.mean.clone();
            self.var = batch.var.clone();
            self.sigma = self.var.iter().map(|v| v.sqrt()).collect();
            self.initialized = true;
            return Ok(f64::INFINITY);
        }
        if batch.channels() != self.mu.len() {
            return Err(shape_err!("centroid has {} channels, batch {}", self.mu.len(), batch.channels()));
        }
        let b = self.momentum;
        let mu: Vec<f64> = self.mu.iter().zip(&batch.mean).map(|(m, t)| (1.0 - b) * m + b * t).collect();
        let var: Vec<f64> = self.var.iter().zip(&batch.var).map(|(v, t)| (1.0 - b) * v + b * t).collect();
        let sigma: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let shift = wasserstein(&self.mu, &self.sigma, &mu, &sigma)?;
        self.mu = mu;
        self.var = var;
        self.sigma = sigma;
        Ok(shift)
    }

    /// Distance of a sample to the centroid; zero before the first update.
    pub fn distance(&self, stats: &SampleStats) -> Result<f64> {
        if !self.initialized {
            return Ok(0.0);
        }
        wasserstein(&stats.mu, &stats.sigma, &self.mu, &self.sigma)
    }

    /// Distance between two centroids.
    pub fn distance_to(&self, other: &DomainCentroid) -> Result<f64> {
        wasserstein(&self.mu, &self.sigma, &other.mu, &other.sigma)
    }
}

/// Sample selection and eviction policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Everything is admitted; oldest evicted.
    Naive,
    /// Everything is admitted; uniformly random eviction.
    Random,
    /// Everything is admitted; highest-entropy evicted.
    LowEntropy,
    /// Confident samples only; oldest of the largest class evicted.
    Crm,
    /// Confident samples only; farthest-from-centroid of the largest class
    /// evicted.
    Cndrm,
}

impl SelectionMode {
    pub fn filters_confidence(self) -> bool {
        matches!(self, SelectionMode::Crm | SelectionMode::Cndrm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    /// One `C×L` input.
    pub input: Tensor,
    pub pseudo_label: usize,
    pub confidence: f64,
    pub stats: SampleStats,
    /// Wasserstein distance to the centroid it was last scored against.
    pub wdist: f64,
    /// Prediction entropy at observation time.
    pub entropy: f64,
    /// Assigned by the memory when offered.
    pub arrival_index: u64,
    /// Ground truth carried for reporting only; never read by the policy.
    pub eval_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InsertOutcome {
    RejectedLowConf,
    Inserted,
    InsertedWithEviction(Box<MemorySample>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub capacity: usize,
    pub tau_conf: f64,
    pub tau_delta: f64,
    pub centroid_momentum: f64,
    pub mode: SelectionMode,
    pub seed: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 16,
            tau_conf: DEFAULT_TAU_CONF,
            tau_delta: DEFAULT_TAU_DELTA,
            centroid_momentum: DEFAULT_CENTROID_MOMENTUM,
            mode: SelectionMode::Cndrm,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    config: MemoryConfig,
    samples: Vec<MemorySample>,
    centroid: DomainCentroid,
    rng: ChaCha8Rng,
    next_arrival: u64,
}

impl Memory {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Domain("memory capacity must be positive".into()));
        }
        if !config.tau_conf.is_finite() || !(config.tau_delta >= 0.0) {
            return Err(Error::Domain("thresholds must be finite and tau_delta >= 0".into()));
        }
        let centroid = DomainCentroid::new(config.centroid_momentum)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, samples: Vec::new(), centroid, rng, next_arrival: 0 })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn samples(&self) -> &[MemorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn centroid(&self) -> &DomainCentroid {
        &self.centroid
    }

    /// Distance of `stats` to the current centroid.
    pub fn score(&self, stats: &SampleStats) -> Result<f64> {
        self.centroid.distance(stats)
    }

    /// Offers one candidate; its `arrival_index` is overwritten.
    pub fn insert(&mut self, mut candidate: MemorySample) -> InsertOutcome {
        candidate.arrival_index = self.next_arrival;
        self.next_arrival += 1;
        if self.config.mode.filters_confidence() && !(candidate.confidence > self.config.tau_conf) {
            return InsertOutcome::RejectedLowConf;
        }
        let label = candidate.pseudo_label;
        self.samples.push(candidate);
        if self.samples.len() <= self.config.capacity {
            return InsertOutcome::Inserted;
        }
        let victim = self.pick_victim(label);
        InsertOutcome::InsertedWithEviction(Box::new(self.samples.remove(victim)))
    }

    /// Offers a batch of candidates in order.
    pub fn offer_batch(&mut self, candidates: impl IntoIterator<Item = MemorySample>) -> Vec<InsertOutcome> {
        candidates.into_iter().map(|c| self.insert(c)).collect()
    }

    fn pick_victim(&mut self, candidate_label: usize) -> usize {
        match self.config.mode {
            SelectionMode::Naive => 0,
            SelectionMode::Random => self.rng.random_range(0..self.samples.len()),
            SelectionMode::LowEntropy => argmax_first(self.samples.iter().map(|s| s.entropy)),
            SelectionMode::Crm => {
                let target = self.largest_class(|_| 0.0);
                // Samples are kept in arrival order.
                self.samples.iter().position(|s| s.pseudo_label == target).expect("class is non-empty")
            }
            SelectionMode::Cndrm => {
                let largest = self.largest_class(|s| s.wdist);
                // Both branches of the rule evict from L* once ties are broken:
                // a candidate of L*'s class makes its own class the target.
                let target = if candidate_label != largest { largest } else { candidate_label };
                self.farthest_in(target)
            }
        }
    }

    /// Class with the most samples. Ties go to the class whose highest
    /// `key` member is highest, then to the lowest class id.
    fn largest_class(&self, key: impl Fn(&MemorySample) -> f64) -> usize {
        let mut classes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for s in &self.samples {
            let e = classes.entry(s.pseudo_label).or_insert((0, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 = e.1.max(key(s));
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (&class, &(count, top)) in &classes {
            let better = match best {
                None => true,
                Some((_, bc, bt)) => count > bc || (count == bc && top > bt),
            };
            if better {
                best = Some((class, count, top));
            }
        }
        best.expect("memory is non-empty").0
    }

    fn farthest_in(&self, class: usize) -> usize {
        let mut best: Option<usize> = None;
        for (i, s) in self.samples.iter().enumerate() {
            if s.pseudo_label != class {
                continue;
            }
            if best.is_none_or(|b| s.wdist > self.samples[b].wdist) {
                best = Some(i);
            }
        }
        best.expect("class is non-empty")
    }

    /// Moves the centroid toward `batch` and returns the shift.
    pub fn update_centroid(&mut self, batch: &ChannelStats) -> Result<f64> {
        self.centroid.update(batch)
    }

    /// Re-scores every stored sample when `shift` exceeds `tau_delta`.
    pub fn maybe_rescore(&mut self, shift: f64) -> Result<usize> {
        if !(shift > self.config.tau_delta) {
            return Ok(0);
        }
        for s in &mut self.samples {
            s.wdist = self.centroid.distance(&s.stats)?;
        }
        Ok(self.samples.len())
    }

    /// Stored inputs stacked in arrival order; `None` when empty.
    pub fn batch(&self) -> Option<Tensor> {
        if self.samples.is_empty() {
            return None;
        }
        Some(Tensor::stack(self.samples.iter().map(|s| &s.input)).expect("stored inputs share a shape"))
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.pseudo_label).or_insert(0) += 1;
        }
        out
    }

    /// Fraction of stored samples whose pseudo-label matches the carried
    /// ground truth; `None` when nothing is labeled.
    pub fn pseudo_label_accuracy(&self) -> Option<f64> {
        let labeled: Vec<_> = self.samples.iter().filter_map(|s| s.eval_label.map(|y| y == s.pseudo_label)).collect();
        if labeled.is_empty() {
            return None;
        }
        Some(labeled.iter().filter(|&&hit| hit).count() as f64 / labeled.len() as f64)
    }

    /// One line per sample: `arrival_index pseudo_label confidence wdist`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let _ = writeln!(out, "{} {} {:?} {:?}", s.arrival_index, s.pseudo_label, s.confidence, s.wdist);
        }
        out
    }
}

/// One parsed line of [`Memory::dump`].
#[derive(Clone, Debug, PartialEq)]
pub struct DumpLine {
    pub arrival_index: u64,
    pub pseudo_label: usize,
    pub confidence: f64,
    pub wdist: f64,
}

pub fn parse_dump(text: &str) -> Result<Vec<DumpLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            Ok(DumpLine {
                arrival_index: t[0].parse().map_err(|_| err("bad arrival index"))?,
                pseudo_label: t[1].parse().map_err(|_| err("bad label"))?,
                confidence: t[2].parse().map_err(|_| err("bad confidence"))?,
                wdist: t[3].parse().map_err(|_| err("bad distance"))?,
            })
        })
        .collect()
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
