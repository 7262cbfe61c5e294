//! Inference-only batch-aware memory normalization.
//!
//! After each adaptation event every normalization layer remembers the batch
//! statistics it saw on the memory samples. At inference time those memory
//! statistics are used as the reference, and they are moved toward the live
//! batch statistics only by the part of the deviation that exceeds
//! `alpha` standard errors of the memory estimate (soft shrinkage).
//!
//! The standard errors treat the memory mean and variance as sample
//! statistics over `L·M` values:
//!
//! ```text
//! s²_mean = σ²_m / (L·M)        s²_var = 2σ⁴_m / (L·M − 1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{normalize_channels, scale_shift_channels, ChannelStats, Tensor};

/// Default reliance on memory statistics.
pub const DEFAULT_ALPHA: f64 = 4.0;

/// `sign(x) · max(|x| − λ, 0)`.
pub fn soft_shrink(x: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("shrinkage threshold {lambda} must be >= 0")));
    }
    Ok(shrink_unchecked(x, lambda))
}

#[inline]
fn shrink_unchecked(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

/// `mem + soft_shrink(live − mem, λ)`, evaluated so that the two limits are
/// exact: λ = 0 returns `live` and a dead-zone gap returns `mem` untouched.
#[inline]
fn pull(mem: f64, live: f64, lambda: f64) -> f64 {
    let d = live - mem;
    if d.abs() <= lambda {
        mem
    } else {
        live - d.signum() * lambda
    }
}

/// Elementwise [`soft_shrink`] with per-element thresholds.
pub fn soft_shrink_vec(x: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    if x.len() != lambda.len() {
        return Err(shape_err!("{} values vs {} thresholds", x.len(), lambda.len()));
    }
    x.iter().zip(lambda).map(|(&v, &l)| soft_shrink(v, l)).collect()
}

/// Per-layer memory statistics captured at the last adaptation event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IobmnState {
    memory: Option<ChannelStats>,
    length: usize,
    count: usize,
    alpha: f64,
}

impl IobmnState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("alpha {alpha} must be finite and >= 0")));
        }
        Ok(Self { memory: None, length: 0, count: 0, alpha })
    }

    /// Builds a populated state directly.
    pub fn with_memory(alpha: f64, memory: ChannelStats, length: usize, count: usize) -> Result<Self> {
        let mut s = Self::new(alpha)?;
        s.populate(memory, length, count)?;
        Ok(s)
    }

    /// Replaces the memory statistics; `length` is the layer's spatial
    /// extent and `count` the number of memory samples they came from.
    pub fn populate(&mut self, memory: ChannelStats, length: usize, count: usize) -> Result<()> {
        if length == 0 || count == 0 {
            return Err(Error::Domain(format!("memory statistics need L >= 1 and M >= 1 (got L={length}, M={count})")));
        }
        self.memory = Some(memory);
        self.length = length;
        self.count = count;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.memory = None;
    }

    pub fn is_populated(&self) -> bool {
        self.memory.is_some()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let fresh = Self::new(alpha)?;
        self.alpha = fresh.alpha;
        Ok(())
    }

    pub fn memory_stats(&self) -> Option<&ChannelStats> {
        self.memory.as_ref()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn memory_or_err(&self) -> Result<&ChannelStats> {
        self.memory.as_ref().ok_or_else(|| Error::State("memory normalization statistics not populated".into()))
    }

    /// Sampling variances `(s²_mean, s²_var)` of the memory statistics, per
    /// channel.
    pub fn sampling_variances(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mem = self.memory_or_err()?;
        let n = self.length * self.count;
        if n < 2 {
            return Err(Error::Domain("L·M must be at least 2".into()));
        }
        let n = n as f64;
        let s2_mean = mem.var.iter().map(|v| v / n).collect();
        let s2_var = mem.var.iter().map(|v| 2.0 * v * v / (n - 1.0)).collect();
        Ok((s2_mean, s2_var))
    }

    /// Shrinkage thresholds `(α·s_mean, α·s_var)` per channel.
    pub fn thresholds(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s2m, s2v) = self.sampling_variances()?;
        let a = self.alpha;
        Ok((s2m.iter().map(|v| a * v.sqrt()).collect(), s2v.iter().map(|v| a * v.sqrt()).collect()))
    }

    /// Memory statistics corrected toward `live`. A corrected variance that
    /// would go negative is clamped to zero.
    pub fn corrected_stats(&self, live: &ChannelStats) -> Result<ChannelStats> {
        let mem = self.memory_or_err()?;
        if live.channels() != mem.channels() {
            return Err(shape_err!("live stats have {} channels, memory has {}", live.channels(), mem.channels()));
        }
        let (lam_mean, lam_var) = self.thresholds()?;
        let mean = (0..mem.channels()).map(|c| pull(mem.mean[c], live.mean[c], lam_mean[c])).collect();
        let var = (0..mem.channels()).map(|c| pull(mem.var[c], live.var[c], lam_var[c]).max(0.0)).collect();
        Ok(ChannelStats { mean, var })
    }

    /// `γ·(f − μ̂)/sqrt(σ̂² + ε) + β` with the corrected statistics computed
    /// from `f`'s own batch statistics.
    pub fn normalize(&self, f: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
        let live = ChannelStats::of_feature_map(f)?;
        let stats = self.corrected_stats(&live)?;
        let xhat = normalize_channels(f, &stats.mean, &stats.var, eps)?;
        scale_shift_channels(&xhat, gamma, beta)
    }
}

/// Exponential moving average of test-batch statistics; the inference-stats
/// alternative used for ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaStats {
    decay: f64,
    stats: Option<ChannelStats>,
}

impl EmaStats {
    /// `decay` is the weight kept on the running average per batch.
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Domain(format!("EMA decay {decay} must be in [0, 1)")));
        }
        Ok(Self { decay, stats: None })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    /// Running average after folding in `live`; the first batch seeds it.
    pub fn blend(&self, live: &ChannelStats) -> Result<ChannelStats> {
        let Some(prev) = &self.stats else {
            return Ok(live.clone());
        };
        if prev.channels() != live.channels() {
            return Err(shape_err!("EMA over {} channels, got {}", prev.channels(), live.channels()));
        }
        let d = self.decay;
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, l)| d * p + (1.0 - d) * l).collect() };
        Ok(ChannelStats { mean: mix(&prev.mean, &live.mean), var: mix(&prev.var, &live.var) })
    }

    pub fn commit(&mut self, stats: ChannelStats) {
        self.stats = Some(stats);
    }
}
