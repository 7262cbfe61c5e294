use std::path::Path;
use std::process::{Command, Output};

use stta_cli::records::{self, ResultRecord, SummaryRow, TimingRecord, TimingSummaryRow};
use stta_core::datagen::{make_stream, Corruption, StreamSpec};
use stta_core::model::{AdaptOutcome, NormSource};
use stta_core::presets::SourceSetup;
use tempfile::TempDir;

const SMALL: &str = "\
[stream]
batch_size = 16
seed = 1000

[[stream.segments]]
corruption = \"offset\"
batches = 10

[[stream.segments]]
corruption = \"strong\"
batches = 10
";

fn stta(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stta"))
        .args(args)
        .current_dir(dir)
        .env_remove("STTA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn results(dir: &Path) -> Vec<ResultRecord> {
    records::read_jsonl(&dir.join("results.jsonl")).unwrap()
}

#[test]
fn zero_rate_never_adapts() {
    let dir = setup();
    let o = stta(&["run", "--config", "small.toml", "--mode", "naive,snap", "--ar", "0", "--out", "r"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rs = results(&dir.path().join("r"));
    assert_eq!(rs.len(), 2);
    assert!(rs.iter().all(|r| r.adapt_count == 0 && r.batches == 20 && r.segment_accuracy.len() == 2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup();
    let args = |out: &'static str, workers: &'static str| {
        [
            "run",
            "--config",
            "small.toml",
            "--mode",
            "snap,random",
            "--ar",
            "0.1,0.5",
            "--seeds",
            "0,1",
            "--workers",
            workers,
            "--out",
            out,
        ]
    };
    assert_eq!(code(&stta(&args("a", "1"), dir.path())), 0);
    assert_eq!(code(&stta(&args("b", "3"), dir.path())), 0);
    for f in ["results.jsonl", "summary.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let rs = results(&dir.path().join("a"));
    let order: Vec<(String, u64)> = rs.iter().map(|r| (r.cell.clone(), r.seed)).collect();
    assert_eq!(order[0], ("snap@0.1".into(), 0));
    assert_eq!(order[1], ("snap@0.1".into(), 1));
    assert_eq!(order.len(), 8);
}

#[test]
fn tent_cell_matches_standalone_loop() {
    let dir = setup();
    let o =
        stta(&["run", "--config", "small.toml", "--mode", "tent-equivalent", "--ar", "1", "--out", "r"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rs = results(&dir.path().join("r"));
    assert_eq!(rs.len(), 1);

    // Predict on each batch with its own statistics, then one entropy step
    // on that batch.
    let setup = SourceSetup::default();
    let (mut model, _) = setup.pretrained(0).unwrap();
    let mut spec = StreamSpec::single(setup.task.clone(), Corruption::preset("offset").unwrap(), 10, 16, 1000);
    spec.segments.push(stta_core::datagen::Segment { corruption: Corruption::preset("strong").unwrap(), batches: 10 });
    let (mut hits, mut total, mut steps) = (0, 0, 0);
    for b in make_stream(&spec).unwrap() {
        let preds = model.predict(&b.inputs, NormSource::Batch).unwrap();
        hits += preds.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
        total += b.labels.len();
        if let AdaptOutcome::Updated { .. } = model.adapt_step(&b.inputs, 1e-3).unwrap() {
            steps += 1;
        }
    }
    assert_eq!(rs[0].adapt_count, steps);
    assert_eq!(rs[0].accuracy, hits as f64 / total as f64);
}

#[test]
fn config_errors_are_line_anchored() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[run]\nseeds = [0]\n\n[engine]\ntau_conf = 0.5\nalpah = 3.0\n")
        .unwrap();
    let o = stta(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.toml:6:"), "{}", stderr(&o));

    std::fs::write(dir.path().join("mode.toml"), "[run]\nmodes = [\"snap\",\n  \"tent\"]\n").unwrap();
    let o = stta(&["run", "--config", "mode.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("mode.toml:2:") && stderr(&o).contains("tent"), "{}", stderr(&o));

    let o = stta(&["run", "--config", "missing.toml"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    for args in [
        vec!["run", "--mode", "tent"],
        vec!["run", "--ar", "1.5"],
        vec!["run", "--bogus"],
        vec!["run", "--pretrain", "--checkpoint", "x"],
        vec!["run", "--checkpoint", "does-not-exist.txt"],
        vec!["frobnicate"],
    ] {
        let o = stta(&args, dir.path());
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(code(&stta(&["--help"], dir.path())), 0);
}

#[test]
fn thresholds_exit_two() {
    let dir = setup();
    let o = stta(
        &["run", "--config", "small.toml", "--mode", "source-only", "--min-accuracy", "0.99", "--out", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("below 0.99"));
    // The results are still complete.
    assert_eq!(results(&dir.path().join("r")).len(), 1);
    let o = stta(
        &["run", "--config", "small.toml", "--mode", "source-only", "--min-accuracy", "0.1", "--out", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
}

#[test]
fn runtime_failure_flushes_partial_results() {
    let dir = setup();
    // The naive cell diverges; the non-adapting cell before it completes.
    let o = stta(
        &[
            "run",
            "--config",
            "small.toml",
            "--mode",
            "bn-stats,naive",
            "--ar",
            "1",
            "--lr",
            "1.7976931348623157e308",
            "--out",
            "r",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("naive@1 seed 0"), "{}", stderr(&o));
    let rs = results(&dir.path().join("r"));
    assert_eq!(rs.len(), 1);
    assert_eq!(rs[0].cell, "bn-stats@0");
    let summary: Vec<SummaryRow> = records::read_csv(&dir.path().join("r/summary.csv")).unwrap();
    assert_eq!(summary.len(), 1);
}

#[test]
fn checkpoint_matches_pretraining() {
    let dir = setup();
    let o = stta(&["pretrain", "--seed", "0", "--out", "model.txt"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let common = ["run", "--config", "small.toml", "--mode", "snap", "--seeds", "0"];
    let a = stta(&[&common[..], &["--checkpoint", "model.txt", "--out", "a"]].concat(), dir.path());
    let b = stta(&[&common[..], &["--pretrain", "--out", "b"]].concat(), dir.path());
    assert_eq!((code(&a), code(&b)), (0, 0));
    assert_eq!(results(&dir.path().join("a")), results(&dir.path().join("b")));
}

#[test]
fn output_dir_from_environment() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_stta"))
        .args(["run", "--config", "small.toml", "--mode", "bn-stats"])
        .current_dir(dir.path())
        .env("STTA_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("from-env/results.jsonl").exists());
    // The flag wins over the environment.
    let o = Command::new(env!("CARGO_BIN_EXE_stta"))
        .args(["run", "--config", "small.toml", "--mode", "bn-stats", "--out", "flag"])
        .current_dir(dir.path())
        .env("STTA_OUT_DIR", "from-env2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("flag/results.jsonl").exists() && !dir.path().join("from-env2").exists());
}

#[test]
fn result_files_round_trip() {
    let dir = setup();
    let o =
        stta(&["run", "--config", "small.toml", "--mode", "snap,bn-stats", "--seeds", "0,1", "--out", "r"], dir.path());
    assert_eq!(code(&o), 0);
    let r = dir.path().join("r");
    let text = std::fs::read_to_string(r.join("results.jsonl")).unwrap();
    let rs: Vec<ResultRecord> = records::read_jsonl(&r.join("results.jsonl")).unwrap();
    let again: String = rs.iter().map(|x| records::to_json_line(x) + "\n").collect();
    assert_eq!(again, text);

    let timing: Vec<TimingRecord> = records::read_jsonl(&r.join("timing.jsonl")).unwrap();
    assert_eq!(timing.len(), 4);
    let again: String = timing.iter().map(|x| records::to_json_line(x) + "\n").collect();
    assert_eq!(again, std::fs::read_to_string(r.join("timing.jsonl")).unwrap());

    for (file, copy) in [("summary.csv", "s2.csv"), ("timing.csv", "t2.csv")] {
        let path = r.join(file);
        let out = dir.path().join(copy);
        if file == "summary.csv" {
            let rows: Vec<SummaryRow> = records::read_csv(&path).unwrap();
            assert_eq!(rows, records::summarize(&rs));
            records::write_csv(&out, &rows).unwrap();
        } else {
            let rows: Vec<TimingSummaryRow> = records::read_csv(&path).unwrap();
            assert_eq!(rows.len(), 2);
            records::write_csv(&out, &rows).unwrap();
        }
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&out).unwrap());
    }
}

fn run_modes(dir: &Path, out: &str, modes: &str, seeds: &str) {
    let o =
        stta(&["run", "--config", "small.toml", "--mode", modes, "--ar", "0.1", "--seeds", seeds, "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn compare_with_itself_is_zero() {
    let dir = setup();
    run_modes(dir.path(), "a", "snap,naive", "0,1");
    let o = stta(&["compare", "a", "a/results.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("[1] ")).collect();
    assert_eq!(rows.len(), 2, "{out}");
    for l in rows {
        assert!(l.contains("+0.0000") && l.contains("1.00x"), "{l}");
    }
}

#[test]
fn compare_across_modes_and_gaps() {
    let dir = setup();
    run_modes(dir.path(), "naive", "naive", "0,1,2");
    run_modes(dir.path(), "snap", "snap", "0,1");
    let o = stta(&["compare", "naive", "snap", "--ignore-mode"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("naive@0.1 -> snap@0.1"), "{out}");
    assert!(out.contains("GAP: seeds 2 missing in [1]"), "{out}");
    let delta: f64 =
        out.lines().find_map(|l| l.strip_prefix("mean delta over matched cells: ")).unwrap().trim().parse().unwrap();
    assert!(delta > 0.0, "{out}");

    // Reversed with a drop threshold: flagged.
    let o = stta(&["compare", "snap", "naive", "--ignore-mode", "--max-drop", "0.001"], dir.path());
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(stdout(&o).contains("DROP"));

    // Without --ignore-mode the cells are disjoint.
    let o = stta(&["compare", "naive", "snap"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("share no"), "{}", stderr(&o));

    // A cell present in only one file gets a marker.
    run_modes(dir.path(), "both", "naive,snap", "0");
    let o = stta(&["compare", "both", "naive"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("GAP: missing in [1]"), "{}", stdout(&o));
}

#[test]
fn compare_rejects_other_schema_versions() {
    let dir = setup();
    run_modes(dir.path(), "a", "bn-stats", "0");
    let text = std::fs::read_to_string(dir.path().join("a/results.jsonl")).unwrap();
    std::fs::create_dir(dir.path().join("b")).unwrap();
    std::fs::write(dir.path().join("b/results.jsonl"), text.replace("\"schema_version\":1", "\"schema_version\":2"))
        .unwrap();
    let o = stta(&["compare", "a", "b"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("schema version 2"), "{}", stderr(&o));
    let o = stta(&["compare", "a"], dir.path());
    assert_eq!(code(&o), 1);
}
