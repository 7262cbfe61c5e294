//! Experiment configuration: TOML file, flag overrides, and resolution into
//! a fully specified grid.
//!
//! Every section and key is optional. Precedence is flags, then the file,
//! then built-in defaults. Unknown keys are rejected.
//!
//! ```toml
//! [run]
//! modes = ["snap", "naive"]      # method presets
//! ar = [0.1, 1.0]                # adaptation rates
//! seeds = [0, 1, 2]
//! workers = 4
//! out = "results"
//! checkpoint = "model.txt"       # load instead of pretraining per seed
//!
//! [source]                       # source task, model shape, pretraining
//! source_samples = 600
//! [source.task]
//! separation = 6.0
//! [source.model]
//! hidden = 16
//! [source.pretrain]
//! epochs = 40
//!
//! [engine]                       # applied on top of each mode's preset
//! tau_conf = 0.5
//! lr = 0.001
//!
//! [stream]
//! batch_size = 16
//! seed = 1000                    # per-seed stream seed is seed + run seed
//! ordering = "iid"               # or "class_correlated"
//! [[stream.segments]]
//! corruption = "strong"          # preset name or an inline table
//! batches = 100
//!
//! [thresholds]
//! min_accuracy = 0.8             # per-cell mean across seeds
//! max_latency_ms = 50.0          # per-cell mean per-batch latency
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use stta_core::datagen::{Corruption, Ordering, Segment};
use stta_core::presets::SourceSetup;
use stta_core::{EngineConfig, InferenceStats, Method, SelectionMode, StreamSpec};

use crate::error::{CliError, CliResult};

/// Environment variable naming the output directory when neither the flag
/// nor the file sets one.
pub const OUT_DIR_ENV: &str = "STTA_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "stta-results";

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunSection,
    pub source: SourceSetup,
    pub engine: EngineOverrides,
    pub stream: StreamSection,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub modes: Option<Vec<String>>,
    pub ar: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Optional replacements for [`EngineConfig`] fields; `ar` and `seed` come
/// from the grid.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOverrides {
    pub tau_conf: Option<f64>,
    pub tau_delta: Option<f64>,
    pub alpha: Option<f64>,
    pub beta_centroid: Option<f64>,
    pub lr: Option<f64>,
    pub capacity: Option<usize>,
    pub selection_mode: Option<SelectionMode>,
    pub inference_stats: Option<InferenceStats>,
    pub refresh_memory_stats: Option<bool>,
}

impl EngineOverrides {
    /// `self` wins wherever it is set.
    pub fn over(self, base: EngineOverrides) -> EngineOverrides {
        EngineOverrides {
            tau_conf: self.tau_conf.or(base.tau_conf),
            tau_delta: self.tau_delta.or(base.tau_delta),
            alpha: self.alpha.or(base.alpha),
            beta_centroid: self.beta_centroid.or(base.beta_centroid),
            lr: self.lr.or(base.lr),
            capacity: self.capacity.or(base.capacity),
            selection_mode: self.selection_mode.or(base.selection_mode),
            inference_stats: self.inference_stats.or(base.inference_stats),
            refresh_memory_stats: self.refresh_memory_stats.or(base.refresh_memory_stats),
        }
    }

    pub fn apply(&self, mut c: EngineConfig) -> EngineConfig {
        c.tau_conf = self.tau_conf.unwrap_or(c.tau_conf);
        c.tau_delta = self.tau_delta.unwrap_or(c.tau_delta);
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.beta_centroid = self.beta_centroid.unwrap_or(c.beta_centroid);
        c.lr = self.lr.unwrap_or(c.lr);
        c.capacity = self.capacity.or(c.capacity);
        c.selection_mode = self.selection_mode.unwrap_or(c.selection_mode);
        c.inference_stats = self.inference_stats.unwrap_or(c.inference_stats);
        c.refresh_memory_stats = self.refresh_memory_stats.unwrap_or(c.refresh_memory_stats);
        c
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub batch_size: usize,
    pub seed: u64,
    pub ordering: Ordering,
    pub segments: Vec<SegmentSection>,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            batch_size: 16,
            seed: 1000,
            ordering: Ordering::Iid,
            segments: vec![SegmentSection { corruption: CorruptionRef::Preset("strong".into()), batches: 100 }],
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub corruption: CorruptionRef,
    pub batches: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum CorruptionRef {
    Preset(String),
    Custom(Corruption),
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub min_accuracy: Option<f64>,
    pub max_latency_ms: Option<f64>,
}

/// Values given on the command line; `None` defers to the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub modes: Option<Vec<Method>>,
    pub ar: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pretrain: bool,
    pub engine: EngineOverrides,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    /// Pretrain a fresh model for every seed.
    Pretrain,
    /// One saved model shared by all seeds.
    Checkpoint(PathBuf),
}

/// One (mode, AR) point of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mode: Method,
    pub ar: f64,
    /// Resolved configuration; `seed` is filled in per run.
    pub config: EngineConfig,
}

impl Cell {
    pub fn id(&self) -> String {
        cell_id(self.mode, self.ar)
    }
}

pub fn cell_id(mode: Method, ar: f64) -> String {
    format!("{mode}@{ar}")
}

/// Everything needed to execute an experiment, with no defaults left.
#[derive(Clone, Debug)]
pub struct Grid {
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub setup: SourceSetup,
    /// Stream for run seed 0; other seeds add to `stream.seed`.
    pub stream: StreamSpec,
    pub model: ModelSource,
    pub workers: usize,
    pub out: PathBuf,
    pub thresholds: Thresholds,
}

impl Grid {
    pub fn stream_for(&self, seed: u64) -> StreamSpec {
        StreamSpec { seed: self.stream.seed.wrapping_add(seed), ..self.stream.clone() }
    }
}

/// Reads and parses `path`; syntax errors carry the offending line.
pub fn load(path: &Path) -> CliResult<(ConfigFile, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: cannot read config: {e}", path.display())))?;
    let file = parse(&text, &path.display().to_string())?;
    Ok((file, text))
}

pub fn parse(text: &str, name: &str) -> CliResult<ConfigFile> {
    toml::from_str(text).map_err(|e| {
        let at = e.span().map(|s| line_of_offset(text, s.start));
        CliError::Usage(anchored(name, at, e.message().trim()))
    })
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn anchored(name: &str, line: Option<usize>, msg: &str) -> String {
    match line {
        Some(l) => format!("{name}:{l}: {msg}"),
        None => format!("{name}: {msg}"),
    }
}

/// Line of the `nth` assignment to `key` inside `section` (a dotted table
/// path), falling back to the section header.
fn locate(text: &str, section: &str, key: &str, nth: usize) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    let mut seen = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        let assigned = line.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='));
        if current == section && assigned {
            if seen == nth {
                return Some(i + 1);
            }
            seen += 1;
        }
    }
    header
}

/// Source of the config for error anchoring.
struct Origin<'a> {
    name: &'a str,
    text: &'a str,
}

impl Origin<'_> {
    fn err(&self, section: &str, key: &str, nth: usize, msg: impl AsRef<str>) -> CliError {
        let line = if self.text.is_empty() { None } else { locate(self.text, section, key, nth) };
        CliError::Usage(anchored(self.name, line, msg.as_ref()))
    }
}

/// Merges file and flags into a grid. `file` is `None` without `--config`.
pub fn resolve(file: Option<(&ConfigFile, &str, &str)>, flags: Overrides) -> CliResult<Grid> {
    let empty = ConfigFile::default();
    let (cfg, text, name) = file.unwrap_or((&empty, "", "<flags>"));
    let origin = Origin { name, text };

    let modes = match (flags.modes, &cfg.run.modes) {
        (Some(m), _) => m,
        (None, Some(names)) => names
            .iter()
            .map(|n| n.parse::<Method>().map_err(|e| origin.err("run", "modes", 0, e.to_string())))
            .collect::<CliResult<_>>()?,
        (None, None) => vec![Method::Snap],
    };
    let ars = flags.ar.or(cfg.run.ar.clone()).unwrap_or_else(|| vec![0.1]);
    let seeds = flags.seeds.or(cfg.run.seeds.clone()).unwrap_or_else(|| vec![0]);
    if modes.is_empty() || ars.is_empty() || seeds.is_empty() {
        return Err(origin.err("run", "modes", 0, "modes, ar and seeds must be non-empty"));
    }
    for &ar in &ars {
        if !(0.0..=1.0).contains(&ar) {
            return Err(origin.err("run", "ar", 0, format!("ar {ar} must be in [0, 1]")));
        }
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(origin.err("run", "seeds", 0, "seeds must be distinct"));
    }

    let engine = flags.engine.over(cfg.engine.clone());
    let mut cells: Vec<Cell> = Vec::new();
    for &mode in &modes {
        // Modes that never adapt collapse to a single AR = 0 cell.
        let rates: Vec<f64> = if mode.never_adapts() { vec![0.0] } else { ars.clone() };
        for ar in rates {
            let config = engine.apply(mode.config(ar, 0));
            config.validate().map_err(|e| origin.err("engine", "", 0, format!("{}: {e}", cell_id(mode, ar))))?;
            let cell = Cell { mode, ar, config };
            if cells.iter().any(|c| c.id() == cell.id()) {
                return Err(origin.err("run", "modes", 0, format!("cell {} appears twice", cell.id())));
            }
            cells.push(cell);
        }
    }

    let setup = cfg.source.clone();
    setup.validate().map_err(|e| origin.err("source", "", 0, e.to_string()))?;
    if setup.source_samples < setup.task.classes {
        return Err(origin.err("source", "source_samples", 0, "need at least one source sample per class"));
    }

    let st = &cfg.stream;
    if st.batch_size == 0 {
        return Err(origin.err("stream", "batch_size", 0, "batch_size must be positive"));
    }
    let mut segments = Vec::new();
    for (i, seg) in st.segments.iter().enumerate() {
        let corruption = match &seg.corruption {
            CorruptionRef::Preset(name) => Corruption::preset(name),
            CorruptionRef::Custom(c) => c.validate().map(|_| c.clone()),
        }
        .map_err(|e| origin.err("stream.segments", "corruption", i, e.to_string()))?;
        segments.push(Segment { corruption, batches: seg.batches });
    }
    let stream = StreamSpec {
        task: setup.task.clone(),
        segments,
        batch_size: st.batch_size,
        seed: st.seed,
        ordering: st.ordering,
    };
    stream.validate().map_err(|e| origin.err("stream", "", 0, e.to_string()))?;
    if stream.total_batches() == 0 {
        return Err(origin.err("stream", "segments", 0, "the stream has no batches"));
    }

    let model = match (flags.pretrain, flags.checkpoint, &cfg.run.checkpoint) {
        (true, _, _) => ModelSource::Pretrain,
        (false, Some(p), _) => ModelSource::Checkpoint(p),
        (false, None, Some(p)) => ModelSource::Checkpoint(p.clone()),
        (false, None, None) => ModelSource::Pretrain,
    };

    let workers = flags
        .workers
        .or(cfg.run.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if workers == 0 {
        return Err(origin.err("run", "workers", 0, "workers must be at least 1"));
    }
    let out = flags
        .out
        .or(cfg.run.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let thresholds = Thresholds {
        min_accuracy: flags.thresholds.min_accuracy.or(cfg.thresholds.min_accuracy),
        max_latency_ms: flags.thresholds.max_latency_ms.or(cfg.thresholds.max_latency_ms),
    };

    Ok(Grid { cells, seeds, setup, stream, model, workers, out, thresholds })
}
