use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stta_cli::compare::{compare, CompareOptions, ResultSet};
use stta_cli::config::{self, EngineOverrides, Overrides, Thresholds};
use stta_cli::{runner, CliError, CliResult};
use stta_core::{InferenceStats, Method, SelectionMode};

/// Sparse test-time adaptation experiments on synthetic shifted streams.
#[derive(Parser)]
#[command(name = "stta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run a grid of (mode, AR) cells over seeds and write result files.
    Run(RunArgs),
    /// Compare result sets against the first one.
    Compare(CompareArgs),
    /// Pretrain a source model and save it as a checkpoint.
    Pretrain(PretrainArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adaptation rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    ar: Option<Vec<f64>>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Method presets, comma separated: snap, naive, random, low_entropy,
    /// crm, cndrm, ema, tent-equivalent, source-only, bn-stats.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    mode: Option<Vec<Method>>,
    /// Output directory [default: $STTA_OUT_DIR, else ./stta-results].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    workers: Option<usize>,
    /// Pretrain a model per seed, ignoring any configured checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pretrain: bool,
    /// Load the model from a checkpoint instead of pretraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
    /// Fail (exit 2) if any cell's mean accuracy is below this.
    #[arg(long)]
    min_accuracy: Option<f64>,
    /// Fail (exit 2) if any cell's mean per-batch latency exceeds this.
    #[arg(long)]
    max_latency_ms: Option<f64>,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    tau_conf: Option<f64>,
    #[arg(long)]
    tau_delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta_centroid: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    capacity: Option<usize>,
    /// naive, random, low_entropy, crm or cndrm.
    #[arg(long, value_parser = parse_enum::<SelectionMode>)]
    selection_mode: Option<SelectionMode>,
    /// iobmn, ema, batch or source.
    #[arg(long, value_parser = parse_enum::<InferenceStats>)]
    inference_stats: Option<InferenceStats>,
    #[arg(long)]
    refresh_memory_stats: Option<bool>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories or results.jsonl files; the first is the baseline.
    #[arg(required = true, num_args = 2..)]
    inputs: Vec<PathBuf>,
    /// Match cells on AR and seed only, so different modes line up.
    #[arg(long)]
    ignore_mode: bool,
    /// Flag (exit 2) cells whose accuracy drops by more than this fraction.
    #[arg(long)]
    max_drop: Option<f64>,
    /// Flag (exit 2) cells whose latency ratio exceeds this.
    #[arg(long)]
    max_latency_ratio: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// TOML experiment config; only the [source] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: stta_core::Error| e.to_string())
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn run(args: RunArgs) -> CliResult<()> {
    let loaded = args.config.as_deref().map(config::load).transpose()?;
    let name = args.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let e = args.engine;
    let flags = Overrides {
        modes: args.mode,
        ar: args.ar,
        seeds: args.seeds,
        workers: args.workers,
        out: args.out,
        checkpoint: args.checkpoint,
        pretrain: args.pretrain,
        engine: EngineOverrides {
            tau_conf: e.tau_conf,
            tau_delta: e.tau_delta,
            alpha: e.alpha,
            beta_centroid: e.beta_centroid,
            lr: e.lr,
            capacity: e.capacity,
            selection_mode: e.selection_mode,
            inference_stats: e.inference_stats,
            refresh_memory_stats: e.refresh_memory_stats,
        },
        thresholds: Thresholds { min_accuracy: args.min_accuracy, max_latency_ms: args.max_latency_ms },
    };
    let grid = config::resolve(loaded.as_ref().map(|(c, t)| (c, t.as_str(), name.as_str())), flags)?;
    let outcome = runner::execute(&grid)?;
    print!("{}", runner::render_summary(&outcome));
    println!("results in {}", grid.out.display());
    outcome.status()
}

fn compare_cmd(args: CompareArgs) -> CliResult<()> {
    let sets = args.inputs.iter().map(|p| ResultSet::load(p)).collect::<CliResult<Vec<_>>>()?;
    let opts = CompareOptions {
        ignore_mode: args.ignore_mode,
        max_drop: args.max_drop,
        max_latency_ratio: args.max_latency_ratio,
    };
    let cmp = compare(&sets, &opts)?;
    print!("{}", cmp.render(&sets));
    let flagged = cmp.flagged();
    if !flagged.is_empty() {
        return Err(CliError::Threshold(format!("{} cell(s) flagged", flagged.len())));
    }
    Ok(())
}

fn pretrain(args: PretrainArgs) -> CliResult<()> {
    let setup = match &args.config {
        Some(p) => config::load(p)?.0.source,
        None => Default::default(),
    };
    setup.validate()?;
    let acc = runner::pretrain_to(&setup, args.seed, &args.out)?;
    println!("source accuracy {acc:.4}; saved {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Pretrain(a) => pretrain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
