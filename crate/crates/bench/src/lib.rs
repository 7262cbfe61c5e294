//! Shared fixtures for the latency benchmarks.

use stta_core::datagen::{make_stream, Corruption, StreamSpec};
use stta_core::presets::SourceSetup;
use stta_core::{Batch, Model};

/// A pretrained default model and `batches` batches of the strong-shift
/// stream.
pub fn fixture(batches: usize) -> (Model, Vec<Batch>) {
    let setup = SourceSetup::default();
    let (model, _) = setup.pretrained(0).expect("default setup pretrains");
    let spec = StreamSpec::single(setup.task, Corruption::preset("strong").expect("preset exists"), batches, 16, 1000);
    let stream = make_stream(&spec).expect("default stream is valid").collect();
    (model, stream)
}
