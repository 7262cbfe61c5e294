//! Sparse test-time adaptation.
//!
//! A small normalized classifier is adapted to an unlabeled, shifted stream
//! while updating on only a fraction of batches. Two pieces make the sparse
//! schedule work:
//!
//! * [`cndrm`]: a capacity-bounded memory that keeps confident,
//!   class-balanced samples closest to a momentum-tracked domain centroid
//!   (diagonal-Gaussian 2-Wasserstein distance on early-layer statistics).
//! * [`iobmn`]: normalization that reuses the statistics of the last
//!   adapted memory and shrinks them toward the live batch only when the
//!   deviation exceeds a few standard errors.
//!
//! [`engine`] wires both into a streaming loop with an adaptation-rate
//! scheduler; [`datagen`] produces synthetic shifted streams and
//! [`model`] holds the classifier and its entropy-minimization step.
// `!(x >= 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cndrm;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod iobmn;
pub mod model;
pub mod numerics;
pub mod presets;

pub use cndrm::{DomainCentroid, InsertOutcome, Memory, MemorySample, SampleStats, SelectionMode};
pub use datagen::{Batch, Corruption, DomainSpec, Ordering, StreamSpec, TaskSpec};
pub use engine::{AdaptationSchedule, BatchRecord, Engine, EngineConfig, InferenceStats, RunMetrics};
pub use error::{Error, Result};
pub use iobmn::IobmnState;
pub use model::{Model, ModelSpec, NormSource};
pub use numerics::{ChannelStats, Tensor};
pub use presets::Method;
