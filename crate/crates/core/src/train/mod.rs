//! Optimization: Adam with cosine decay, quadruplet sampling, and the
//! two-stage and one-stage training loops.

pub mod optim;
pub mod sampler;
mod trainer;

pub use optim::{cosine_lr, Adam};
pub use sampler::{sample_quadruplets, QuadrupletBatch};
pub use trainer::*;
