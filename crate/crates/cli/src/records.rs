//! Result files written by `stta run`.
//!
//! * `results.jsonl`: one [`ResultRecord`] per (cell, seed), in grid order.
//!   Fully deterministic; reruns produce identical bytes.
//! * `timing.jsonl`: one [`TimingRecord`] per (cell, seed). Wall-clock
//!   measurements, kept apart so the results file stays reproducible.
//! * `summary.csv`: one [`SummaryRow`] per cell, mean ± std across seeds.
//! * `timing.csv`: one [`TimingSummaryRow`] per cell.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stta_core::{EngineConfig, Method, RunMetrics};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_SUMMARY_FILE: &str = "timing.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub schema_version: u32,
    /// `mode@ar`.
    pub cell: String,
    pub mode: Method,
    pub ar: f64,
    pub seed: u64,
    pub batches: usize,
    pub samples: usize,
    pub accuracy: f64,
    /// Accuracy per stream segment, in segment order; `null` for segments
    /// with no batches.
    pub segment_accuracy: Vec<Option<f64>>,
    pub adapt_count: usize,
    /// Scheduled adaptations that found an empty memory.
    pub skipped_count: usize,
    pub memory_mean_len: f64,
    /// Mean over batches of the memory's pseudo-label accuracy.
    pub memory_label_accuracy: Option<f64>,
    /// The engine configuration the run used.
    pub engine: EngineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingRecord {
    pub schema_version: u32,
    pub cell: String,
    pub seed: u64,
    /// Mean wall time per batch over all batches.
    pub mean_latency_ms: f64,
    /// Mean over batches that adapted; `null` when none did.
    pub adapt_latency_ms: Option<f64>,
    /// Mean over batches that did not adapt.
    pub no_adapt_latency_ms: Option<f64>,
    /// Adaptation wall time over total wall time.
    pub adapt_time_share: f64,
    pub total_secs: f64,
}

impl ResultRecord {
    pub fn from_metrics(
        mode: Method,
        ar: f64,
        seed: u64,
        segments: usize,
        engine: &EngineConfig,
        m: &RunMetrics,
    ) -> Self {
        let seg = m.segment_accuracies();
        Self {
            schema_version: SCHEMA_VERSION,
            cell: crate::config::cell_id(mode, ar),
            mode,
            ar,
            seed,
            batches: m.batches(),
            samples: m.records.iter().map(|r| r.batch_size).sum(),
            accuracy: m.accuracy().unwrap_or(f64::NAN),
            segment_accuracy: (0..segments).map(|s| seg.get(&s).copied()).collect(),
            adapt_count: m.adapt_count(),
            skipped_count: m.skipped_count(),
            memory_mean_len: m.mean_memory_len(),
            memory_label_accuracy: m.mean_memory_label_accuracy(),
            engine: engine.clone(),
        }
    }
}

impl TimingRecord {
    pub fn from_metrics(cell: String, seed: u64, m: &RunMetrics) -> Self {
        let total = m.total_inference_secs() + m.total_adapt_secs();
        let (adapt, no_adapt) = m.mean_latency();
        Self {
            schema_version: SCHEMA_VERSION,
            cell,
            seed,
            mean_latency_ms: if m.batches() > 0 { 1e3 * total / m.batches() as f64 } else { 0.0 },
            adapt_latency_ms: adapt.map(|s| 1e3 * s),
            no_adapt_latency_ms: no_adapt.map(|s| 1e3 * s),
            adapt_time_share: m.adapt_time_share(),
            total_secs: total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub mode: Method,
    pub ar: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub accuracy_std: f64,
    pub adapt_count_mean: f64,
    pub memory_mean_len: f64,
    /// Empty when no seed recorded memory labels.
    pub memory_label_accuracy_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummaryRow {
    pub cell: String,
    pub seeds: usize,
    pub mean_latency_ms: f64,
    pub mean_latency_ms_std: f64,
    pub adapt_latency_ms: Option<f64>,
    pub no_adapt_latency_ms: Option<f64>,
    pub adapt_time_share: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

/// Groups records by cell, keeping first-appearance order.
fn grouped<T>(items: &[T], cell: impl Fn(&T) -> &str) -> Vec<(String, Vec<&T>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&T>> = BTreeMap::new();
    for it in items {
        let key = cell(it).to_string();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(it);
    }
    order
        .into_iter()
        .map(|k| {
            let g = groups.remove(&k).unwrap();
            (k, g)
        })
        .collect()
}

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    grouped(records, |r| &r.cell)
        .into_iter()
        .map(|(cell, rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            SummaryRow {
                cell,
                mode: rs[0].mode,
                ar: rs[0].ar,
                seeds: rs.len(),
                accuracy_mean: mean(&acc),
                accuracy_std: sample_std(&acc),
                adapt_count_mean: mean(&rs.iter().map(|r| r.adapt_count as f64).collect::<Vec<_>>()),
                memory_mean_len: mean(&rs.iter().map(|r| r.memory_mean_len).collect::<Vec<_>>()),
                memory_label_accuracy_mean: mean_opt(rs.iter().map(|r| r.memory_label_accuracy)),
            }
        })
        .collect()
}

pub fn summarize_timing(records: &[TimingRecord]) -> Vec<TimingSummaryRow> {
    grouped(records, |r| &r.cell)
        .into_iter()
        .map(|(cell, rs)| {
            let lat: Vec<f64> = rs.iter().map(|r| r.mean_latency_ms).collect();
            TimingSummaryRow {
                cell,
                seeds: rs.len(),
                mean_latency_ms: mean(&lat),
                mean_latency_ms_std: sample_std(&lat),
                adapt_latency_ms: mean_opt(rs.iter().map(|r| r.adapt_latency_ms)),
                no_adapt_latency_ms: mean_opt(rs.iter().map(|r| r.no_adapt_latency_ms)),
                adapt_time_share: mean(&rs.iter().map(|r| r.adapt_time_share).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn to_json_line<T: Serialize>(item: &T) -> String {
    serde_json::to_string(item).expect("records serialize")
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))).collect()
}

/// Parses a JSON-Lines file. Each line must carry the supported
/// `schema_version`; errors name the file and line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| CliError::Usage(format!("{}:{}: {msg}", path.display(), i + 1));
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(at(format!("schema version {v} is not supported (expected {SCHEMA_VERSION})"))),
            None => return Err(at("missing schema_version".into())),
        }
        out.push(serde_json::from_value(value).map_err(|e| at(e.to_string()))?);
    }
    Ok(out)
}

/// Appends lines and flushes after each so partial runs leave usable files.
pub struct JsonlWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = std::fs::File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Self { file: std::io::BufWriter::new(file) })
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> CliResult<()> {
        writeln!(self.file, "{}", to_json_line(item))?;
        self.file.flush()?;
        Ok(())
    }
}
