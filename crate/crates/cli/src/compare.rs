//! `stta compare`: per-cell accuracy deltas and latency ratios between a
//! baseline result set and one or more others.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::records::{self, mean, ResultRecord, TimingRecord, RESULTS_FILE, TIMING_FILE};

#[derive(Clone, Debug, Default)]
pub struct CompareOptions {
    /// Match cells on AR alone, so different modes can be compared.
    pub ignore_mode: bool,
    /// Flag cells whose accuracy falls by more than this (fraction).
    pub max_drop: Option<f64>,
    /// Flag cells whose latency ratio exceeds this.
    pub max_latency_ratio: Option<f64>,
}

/// One loaded result set.
#[derive(Clone, Debug)]
pub struct ResultSet {
    pub name: String,
    pub results: Vec<ResultRecord>,
    /// Empty when no timing file accompanies the results.
    pub timing: Vec<TimingRecord>,
}

impl ResultSet {
    /// `path` is a run directory or a results file. The timing file is
    /// picked up from the same directory when present.
    pub fn load(path: &Path) -> CliResult<Self> {
        let (results_path, timing_path): (PathBuf, Option<PathBuf>) = if path.is_dir() {
            (path.join(RESULTS_FILE), Some(path.join(TIMING_FILE)))
        } else {
            let sibling = (path.file_name().and_then(|n| n.to_str()) == Some(RESULTS_FILE))
                .then(|| path.with_file_name(TIMING_FILE));
            (path.to_path_buf(), sibling)
        };
        let results = records::read_jsonl(&results_path)?;
        let timing = match timing_path {
            Some(p) if p.exists() => records::read_jsonl(&p)?,
            _ => Vec::new(),
        };
        Ok(Self { name: path.display().to_string(), results, timing })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    /// Index of the compared set (1-based among the inputs).
    pub against: usize,
    pub key: String,
    pub base_cell: Option<String>,
    pub other_cell: Option<String>,
    pub matched_seeds: usize,
    pub base_accuracy: Option<f64>,
    pub other_accuracy: Option<f64>,
    /// Mean over matched seeds of other − base accuracy.
    pub delta: Option<f64>,
    /// Mean other latency over mean base latency, matched seeds only.
    pub latency_ratio: Option<f64>,
    /// Gap markers and threshold flags.
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn flagged(&self) -> Vec<&CompareRow> {
        self.rows.iter().filter(|r| r.flags.iter().any(|f| f == "DROP" || f == "SLOW")).collect()
    }

    pub fn mean_delta(&self) -> Option<f64> {
        let d: Vec<f64> = self.rows.iter().filter_map(|r| r.delta).collect();
        (!d.is_empty()).then(|| mean(&d))
    }

    pub fn render(&self, sets: &[ResultSet]) -> String {
        let mut s = format!("baseline: {}\n", sets[0].name);
        for (i, set) in sets.iter().enumerate().skip(1) {
            s += &format!("[{i}]: {}\n", set.name);
        }
        s += &format!(
            "{:<4} {:<22} {:>6} {:>9} {:>9} {:>9} {:>8}  {}\n",
            "vs", "cell", "seeds", "base", "other", "delta", "latency", "flags"
        );
        let num = |v: Option<f64>, signed: bool| match v {
            Some(x) if signed => format!("{x:+.4}"),
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        };
        for r in &self.rows {
            let label = match (&r.base_cell, &r.other_cell) {
                (Some(a), Some(b)) if a != b => format!("{a} -> {b}"),
                (Some(a), _) | (None, Some(a)) => a.clone(),
                (None, None) => r.key.clone(),
            };
            s += &format!(
                "{:<4} {:<22} {:>6} {:>9} {:>9} {:>9} {:>8}  {}\n",
                format!("[{}]", r.against),
                label,
                r.matched_seeds,
                num(r.base_accuracy, false),
                num(r.other_accuracy, false),
                num(r.delta, true),
                r.latency_ratio.map(|x| format!("{x:.2}x")).unwrap_or_else(|| "-".into()),
                r.flags.join(" ")
            );
        }
        if let Some(d) = self.mean_delta() {
            s += &format!("mean delta over matched cells: {d:+.4}\n");
        }
        s
    }
}

struct Keyed<'a> {
    by_key: BTreeMap<String, BTreeMap<u64, &'a ResultRecord>>,
    latency: BTreeMap<(String, u64), f64>,
}

fn key_of(r: &ResultRecord, opts: &CompareOptions) -> String {
    if opts.ignore_mode {
        format!("ar={}", r.ar)
    } else {
        r.cell.clone()
    }
}

fn index<'a>(set: &'a ResultSet, opts: &CompareOptions) -> CliResult<Keyed<'a>> {
    let mut by_key: BTreeMap<String, BTreeMap<u64, &ResultRecord>> = BTreeMap::new();
    for r in &set.results {
        let key = key_of(r, opts);
        if by_key.entry(key.clone()).or_default().insert(r.seed, r).is_some() {
            return Err(CliError::Usage(format!(
                "{}: more than one record for {key} seed {}{}",
                set.name,
                r.seed,
                if opts.ignore_mode { " (several modes share this AR)" } else { "" }
            )));
        }
    }
    let latency = set.timing.iter().map(|t| ((t.cell.clone(), t.seed), t.mean_latency_ms)).collect();
    Ok(Keyed { by_key, latency })
}

/// Compares every set after the first against the first.
pub fn compare(sets: &[ResultSet], opts: &CompareOptions) -> CliResult<Comparison> {
    if sets.len() < 2 {
        return Err(CliError::Usage("compare needs at least two result sets".into()));
    }
    let base = index(&sets[0], opts)?;
    let mut rows = Vec::new();
    for (j, set) in sets.iter().enumerate().skip(1) {
        let other = index(set, opts)?;
        let mut matched_any = false;
        let keys: std::collections::BTreeSet<&String> = base.by_key.keys().chain(other.by_key.keys()).collect();
        for key in keys {
            let (a, b) = (base.by_key.get(key), other.by_key.get(key));
            let cell =
                |m: Option<&BTreeMap<u64, &ResultRecord>>| m.and_then(|m| m.values().next()).map(|r| r.cell.clone());
            let mut row = CompareRow {
                against: j,
                key: key.clone(),
                base_cell: cell(a),
                other_cell: cell(b),
                matched_seeds: 0,
                base_accuracy: None,
                other_accuracy: None,
                delta: None,
                latency_ratio: None,
                flags: Vec::new(),
            };
            let (a, b) = match (a, b) {
                (Some(a), Some(b)) => (a, b),
                (Some(_), None) => {
                    row.flags.push(format!("GAP: missing in [{j}]"));
                    rows.push(row);
                    continue;
                }
                _ => {
                    row.flags.push("GAP: missing in baseline".into());
                    rows.push(row);
                    continue;
                }
            };
            let seeds: Vec<u64> = a.keys().filter(|s| b.contains_key(s)).copied().collect();
            let only_a: Vec<String> = a.keys().filter(|s| !b.contains_key(s)).map(u64::to_string).collect();
            let only_b: Vec<String> = b.keys().filter(|s| !a.contains_key(s)).map(u64::to_string).collect();
            if !only_a.is_empty() {
                row.flags.push(format!("GAP: seeds {} missing in [{j}]", only_a.join(",")));
            }
            if !only_b.is_empty() {
                row.flags.push(format!("GAP: seeds {} missing in baseline", only_b.join(",")));
            }
            row.matched_seeds = seeds.len();
            if seeds.is_empty() {
                rows.push(row);
                continue;
            }
            matched_any = true;
            let acc_a: Vec<f64> = seeds.iter().map(|s| a[s].accuracy).collect();
            let acc_b: Vec<f64> = seeds.iter().map(|s| b[s].accuracy).collect();
            row.base_accuracy = Some(mean(&acc_a));
            row.other_accuracy = Some(mean(&acc_b));
            let delta = mean(&acc_b.iter().zip(&acc_a).map(|(y, x)| y - x).collect::<Vec<_>>());
            row.delta = Some(delta);
            let lat = |k: &Keyed, recs: &BTreeMap<u64, &ResultRecord>| -> Option<f64> {
                let v: Option<Vec<f64>> =
                    seeds.iter().map(|s| k.latency.get(&(recs[s].cell.clone(), *s)).copied()).collect();
                v.map(|v| mean(&v))
            };
            if let (Some(la), Some(lb)) = (lat(&base, a), lat(&other, b)) {
                if la > 0.0 {
                    row.latency_ratio = Some(lb / la);
                }
            }
            if opts.max_drop.is_some_and(|d| delta < -d) {
                row.flags.push("DROP".into());
            }
            if let (Some(max), Some(r)) = (opts.max_latency_ratio, row.latency_ratio) {
                if r > max {
                    row.flags.push("SLOW".into());
                }
            }
            rows.push(row);
        }
        if !matched_any {
            return Err(CliError::Usage(format!(
                "{} and {} share no (cell, seed) pairs{}",
                sets[0].name,
                set.name,
                if opts.ignore_mode { "" } else { "; pass --ignore-mode to match on AR only" }
            )));
        }
    }
    Ok(Comparison { rows })
}
