//! Multi-view hierarchical graph encoder for sketch-to-shape retrieval.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense matrices and a tape-based reverse-mode differentiator.
//! - [`graph`]: camera rigs and kNN view graphs.
//! - [`encoder`]: the hierarchical view-graph encoder and the sketch adapter.
//! - [`losses`]: prototype alignment, AM-softmax and quadruplet objectives.
//! - [`data`]: the MVHF interchange format, the synthetic provider and splits.
//! - [`train`]: Adam, the cosine schedule, quadruplet sampling and training loops.
//! - [`metrics`]: ranking and the SHREC retrieval metrics.
//! - [`pipeline`]: experiment configuration and end-to-end train-and-evaluate runs.
//! - [`diagnostics`]: the finite-difference gradient suite.

pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::{Matrix, Tape, Var};
