//! Named method configurations used by the experiment runner and the
//! acceptance suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cndrm::SelectionMode;
use crate::datagen::{sample_source, TaskSpec};
use crate::engine::{EngineConfig, InferenceStats};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, PretrainConfig, PretrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    /// Class/domain-representative memory with memory-aware normalization.
    Snap,
    /// Adapt on the most recent batch; batch statistics at inference.
    Naive,
    Random,
    LowEntropy,
    Crm,
    /// Representative memory with batch statistics at inference.
    Cndrm,
    /// Representative memory with EMA statistics at inference.
    Ema,
    /// Plain entropy minimization on every visited batch.
    TentEquivalent,
    /// No adaptation, frozen source statistics.
    SourceOnly,
    /// No adaptation, test-batch statistics.
    BnStats,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Snap,
        Method::Naive,
        Method::Random,
        Method::LowEntropy,
        Method::Crm,
        Method::Cndrm,
        Method::Ema,
        Method::TentEquivalent,
        Method::SourceOnly,
        Method::BnStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Snap => "snap",
            Method::Naive => "naive",
            Method::Random => "random",
            Method::LowEntropy => "low_entropy",
            Method::Crm => "crm",
            Method::Cndrm => "cndrm",
            Method::Ema => "ema",
            Method::TentEquivalent => "tent-equivalent",
            Method::SourceOnly => "source-only",
            Method::BnStats => "bn-stats",
        }
    }

    /// Whether the method ignores the adaptation rate.
    pub fn never_adapts(self) -> bool {
        matches!(self, Method::SourceOnly | Method::BnStats)
    }

    /// Engine configuration for this method at adaptation rate `ar`.
    pub fn config(self, ar: f64, seed: u64) -> EngineConfig {
        let base = EngineConfig { ar, seed, ..EngineConfig::default() };
        let with = |mode, stats| EngineConfig { selection_mode: mode, inference_stats: stats, ..base.clone() };
        match self {
            Method::Snap => with(SelectionMode::Cndrm, InferenceStats::Iobmn),
            Method::Naive => with(SelectionMode::Naive, InferenceStats::Batch),
            Method::Random => with(SelectionMode::Random, InferenceStats::Batch),
            Method::LowEntropy => with(SelectionMode::LowEntropy, InferenceStats::Batch),
            Method::Crm => with(SelectionMode::Crm, InferenceStats::Batch),
            Method::Cndrm => with(SelectionMode::Cndrm, InferenceStats::Batch),
            Method::Ema => with(SelectionMode::Cndrm, InferenceStats::Ema),
            Method::TentEquivalent => {
                EngineConfig { tau_conf: 0.0, capacity: None, ..with(SelectionMode::Naive, InferenceStats::Batch) }
            }
            Method::SourceOnly => EngineConfig { ar: 0.0, ..with(SelectionMode::Naive, InferenceStats::Source) },
            Method::BnStats => EngineConfig { ar: 0.0, ..with(SelectionMode::Naive, InferenceStats::Batch) },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL.into_iter().find(|m| m.name().replace('_', "-") == norm).ok_or_else(|| {
            let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Usage(format!("unknown mode `{s}` (known: {})", known.join(", ")))
        })
    }
}

/// Source-side setup shared by experiments: task, architecture and
/// pretraining schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSetup {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub source_samples: usize,
    pub pretrain: PretrainConfig,
}

impl Default for SourceSetup {
    fn default() -> Self {
        let task = TaskSpec::default();
        let model = ModelSpec {
            in_channels: task.channels,
            length: task.length,
            classes: task.classes,
            ..ModelSpec::default()
        };
        Self { task, model, source_samples: 600, pretrain: PretrainConfig::default() }
    }
}

impl SourceSetup {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let (t, m) = (&self.task, &self.model);
        if (t.channels, t.length, t.classes) != (m.in_channels, m.length, m.classes) {
            return Err(Error::Usage(format!(
                "model shape {}x{} with {} classes does not match task {}x{} with {} classes",
                m.in_channels, m.length, m.classes, t.channels, t.length, t.classes
            )));
        }
        Ok(())
    }

    /// Pretrains a fresh model on source data; all randomness comes from
    /// `seed`.
    pub fn pretrained(&self, seed: u64) -> Result<(Model, PretrainReport)> {
        self.validate()?;
        let data = sample_source(&self.task, self.source_samples, seed)?;
        let mut model = Model::new(&self.model, seed)?;
        let cfg = PretrainConfig { seed, ..self.pretrain.clone() };
        let report = model.pretrain(&data.inputs, &data.labels, &cfg)?;
        Ok((model, report))
    }
}
