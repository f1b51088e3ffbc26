//! Feature sources: the MVHF interchange format, the synthetic generator and
//! train/test splitting.

pub mod archive;
pub mod dataset;
pub mod synth;

pub use archive::{read_archive, write_archive, FeatureArchive, Manifest, Tensor};
pub use dataset::{make_splits, Dataset, Shape, Sketch, SplitMode, Splits};
