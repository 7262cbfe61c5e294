//! Grid execution on a bounded worker pool.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use stta_core::datagen::make_stream;
use stta_core::presets::SourceSetup;
use stta_core::{Engine, EngineConfig, Model};

use crate::config::{Cell, Grid, ModelSource};
use crate::error::{CliError, CliResult};
use crate::records::{
    self, JsonlWriter, ResultRecord, SummaryRow, TimingRecord, TimingSummaryRow, RESULTS_FILE, SUMMARY_FILE,
    TIMING_FILE, TIMING_SUMMARY_FILE,
};

#[derive(Debug, Default)]
pub struct RunOutcome {
    pub results: Vec<ResultRecord>,
    pub timing: Vec<TimingRecord>,
    pub summary: Vec<SummaryRow>,
    pub timing_summary: Vec<TimingSummaryRow>,
    /// One message per (cell, seed) that did not complete.
    pub failures: Vec<String>,
    /// One message per violated threshold.
    pub threshold_failures: Vec<String>,
}

impl RunOutcome {
    /// Exit status: runtime failures first, then thresholds.
    pub fn status(&self) -> CliResult<()> {
        if !self.failures.is_empty() {
            return Err(CliError::Runtime(format!(
                "{} run(s) failed; partial results written:\n  {}",
                self.failures.len(),
                self.failures.join("\n  ")
            )));
        }
        if !self.threshold_failures.is_empty() {
            return Err(CliError::Threshold(format!(
                "threshold checks failed:\n  {}",
                self.threshold_failures.join("\n  ")
            )));
        }
        Ok(())
    }
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))
}

/// Pretrains one model and saves it to `path`; returns the source accuracy.
pub fn pretrain_to(setup: &SourceSetup, seed: u64, path: &Path) -> CliResult<f64> {
    let (model, report) = setup.pretrained(seed)?;
    model.save(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(report.source_accuracy)
}

fn load_checkpoint(path: &Path, setup: &SourceSetup) -> CliResult<Model> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let model = Model::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let m = &setup.model;
    if (model.in_channels(), model.length(), model.classes()) != (m.in_channels, m.length, m.classes) {
        return Err(CliError::Usage(format!(
            "checkpoint {} is {}x{} with {} classes; the task is {}x{} with {} classes",
            path.display(),
            model.in_channels(),
            model.length(),
            model.classes(),
            m.in_channels,
            m.length,
            m.classes
        )));
    }
    Ok(model)
}

fn models(grid: &Grid, pool: &rayon::ThreadPool) -> CliResult<BTreeMap<u64, Model>> {
    match &grid.model {
        ModelSource::Checkpoint(path) => {
            let model = load_checkpoint(path, &grid.setup)?;
            Ok(grid.seeds.iter().map(|&s| (s, model.clone())).collect())
        }
        ModelSource::Pretrain => pool.install(|| {
            grid.seeds
                .par_iter()
                .map(|&s| {
                    let (m, _) = grid
                        .setup
                        .pretrained(s)
                        .map_err(|e| CliError::Runtime(format!("pretraining seed {s}: {e}")))?;
                    Ok((s, m))
                })
                .collect()
        }),
    }
}

type JobOutput = Result<(ResultRecord, TimingRecord), String>;

fn run_job(grid: &Grid, cell: &Cell, seed: u64, model: &Model) -> JobOutput {
    let spec = grid.stream_for(seed);
    let config = EngineConfig { seed, ..cell.config.clone() };
    let attempt = catch_unwind(AssertUnwindSafe(|| -> stta_core::Result<_> {
        let mut engine = Engine::new(model.clone(), config.clone(), spec.batch_size)?;
        engine.run_stream(make_stream(&spec)?)
    }));
    let metrics = match attempt {
        Ok(Ok(m)) => m,
        Ok(Err(e)) => return Err(format!("{} seed {seed}: {e}", cell.id())),
        Err(_) => return Err(format!("{} seed {seed}: worker panicked", cell.id())),
    };
    let result = ResultRecord::from_metrics(cell.mode, cell.ar, seed, spec.segments.len(), &config, &metrics);
    let timing = TimingRecord::from_metrics(cell.id(), seed, &metrics);
    Ok((result, timing))
}

/// Runs every (cell, seed) pair and writes the result files into
/// `grid.out`. Records are written in grid order (cell-major, then seed) as
/// soon as all earlier pairs are done, so an interrupted run leaves a valid
/// prefix.
pub fn execute(grid: &Grid) -> CliResult<RunOutcome> {
    std::fs::create_dir_all(&grid.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", grid.out.display())))?;
    let pool = pool(grid.workers)?;
    let models = models(grid, &pool)?;
    let jobs: Vec<(&Cell, u64)> = grid.cells.iter().flat_map(|c| grid.seeds.iter().map(move |&s| (c, s))).collect();

    let mut results_file = JsonlWriter::create(&grid.out.join(RESULTS_FILE))?;
    let mut timing_file = JsonlWriter::create(&grid.out.join(TIMING_FILE))?;
    let mut outcome = RunOutcome::default();
    let (tx, rx) = mpsc::channel::<(usize, JobOutput)>();

    std::thread::scope(|scope| -> CliResult<()> {
        let jobs = &jobs;
        let models = &models;
        let pool = &pool;
        scope.spawn(move || {
            pool.install(|| {
                jobs.par_iter().enumerate().for_each_with(tx, |tx, (i, &(cell, seed))| {
                    let out = run_job(grid, cell, seed, &models[&seed]);
                    // The collector only stops early on a write error.
                    let _ = tx.send((i, out));
                });
            });
        });

        // Single collector: reorders completions into grid order.
        let mut pending: BTreeMap<usize, JobOutput> = BTreeMap::new();
        let mut next = 0;
        for (i, out) in rx {
            pending.insert(i, out);
            while let Some(out) = pending.remove(&next) {
                match out {
                    Ok((r, t)) => {
                        results_file.write(&r)?;
                        timing_file.write(&t)?;
                        eprintln!(
                            "[{}/{}] {} seed {}: accuracy {:.4}",
                            next + 1,
                            jobs.len(),
                            r.cell,
                            r.seed,
                            r.accuracy
                        );
                        outcome.results.push(r);
                        outcome.timing.push(t);
                    }
                    Err(msg) => {
                        eprintln!("[{}/{}] failed: {msg}", next + 1, jobs.len());
                        outcome.failures.push(msg);
                    }
                }
                next += 1;
            }
        }
        Ok(())
    })?;

    outcome.summary = records::summarize(&outcome.results);
    outcome.timing_summary = records::summarize_timing(&outcome.timing);
    records::write_csv(&grid.out.join(SUMMARY_FILE), &outcome.summary)?;
    records::write_csv(&grid.out.join(TIMING_SUMMARY_FILE), &outcome.timing_summary)?;
    outcome.threshold_failures = check_thresholds(grid, &outcome);
    Ok(outcome)
}

fn check_thresholds(grid: &Grid, outcome: &RunOutcome) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(min) = grid.thresholds.min_accuracy {
        for row in &outcome.summary {
            if row.accuracy_mean.is_nan() || row.accuracy_mean < min {
                out.push(format!("{}: mean accuracy {:.4} below {min}", row.cell, row.accuracy_mean));
            }
        }
    }
    if let Some(max) = grid.thresholds.max_latency_ms {
        for row in &outcome.timing_summary {
            if row.mean_latency_ms.is_nan() || row.mean_latency_ms > max {
                out.push(format!("{}: mean latency {:.3} ms above {max} ms", row.cell, row.mean_latency_ms));
            }
        }
    }
    out
}

/// Human-readable per-cell table.
pub fn render_summary(outcome: &RunOutcome) -> String {
    let mut s = format!(
        "{:<24} {:>5} {:>17} {:>8} {:>11} {:>8}\n",
        "cell", "seeds", "accuracy", "adapts", "latency_ms", "mem_acc"
    );
    for row in &outcome.summary {
        let lat = outcome
            .timing_summary
            .iter()
            .find(|t| t.cell == row.cell)
            .map(|t| format!("{:.3}", t.mean_latency_ms))
            .unwrap_or_else(|| "-".into());
        let mem = row.memory_label_accuracy_mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
        s += &format!(
            "{:<24} {:>5} {:>17} {:>8.1} {:>11} {:>8}\n",
            row.cell,
            row.seeds,
            format!("{:.4} ± {:.4}", row.accuracy_mean, row.accuracy_std),
            row.adapt_count_mean,
            lat,
            mem
        );
    }
    s
}
