//! Prints per-seed accuracies of the main methods on the strong-corruption
//! stream. Used to pick the thresholds in the acceptance suite.
//!
//! cargo run --release -p stta-core --example calibrate -- [batches] [seeds]

use std::time::Instant;

use stta_core::datagen::{make_stream, Corruption, StreamSpec};
use stta_core::presets::SourceSetup;
use stta_core::{Engine, Method};

fn main() -> stta_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let batches = args.first().copied().unwrap_or(100);
    let seeds = args.get(1).copied().unwrap_or(5) as u64;
    let lr: Option<f64> = std::env::var("STTA_LR").ok().map(|v| v.parse().expect("number"));
    let setup = SourceSetup::default();
    let cells = [
        (Method::SourceOnly, 0.0),
        (Method::BnStats, 0.0),
        (Method::Naive, 0.1),
        (Method::Snap, 0.1),
        (Method::TentEquivalent, 1.0),
        (Method::Random, 0.1),
        (Method::Cndrm, 0.1),
        (Method::Ema, 0.1),
    ];
    for seed in 0..seeds {
        let t = Instant::now();
        let (model, report) = setup.pretrained(seed)?;
        print!("seed {seed} src {:.3} ({:.1}s)", report.source_accuracy, t.elapsed().as_secs_f64());
        let spec = StreamSpec::single(setup.task.clone(), Corruption::preset("strong")?, batches, 16, 1000 + seed);
        for (m, ar) in cells {
            let mut cfg = m.config(ar, seed);
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            let mut e = Engine::new(model.clone(), cfg, 16)?;
            let metrics = e.run_stream(make_stream(&spec)?)?;
            print!(" | {m}@{ar} {:.3}", metrics.accuracy().unwrap_or(f64::NAN));
        }
        println!();
    }
    Ok(())
}
