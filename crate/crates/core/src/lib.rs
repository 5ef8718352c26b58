//! Columnar flat-file time-series store with a factor expression engine,
//! layered result caches, a staged parallel dataset builder, a search-space
//! sampler for hyperparameter re-tuning and a benchmark harness.

pub mod bench;
pub mod cache;
pub mod dataset;
pub mod expr;
pub mod hash;
pub mod hte;
pub mod storage;

pub use dataset::{AlignedFrame, BuildConfig, BuildError, Engine, QuerySpec, StageTimings, Universe};
