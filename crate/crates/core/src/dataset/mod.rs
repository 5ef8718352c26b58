//! Staged dataset construction: resolve the universe, load raw data or
//! cached values, compute expressions per instrument in parallel, label
//! rows, filter by pool membership and combine into one frame.

mod builder;
mod frame;

use chrono::NaiveDate;
use thiserror::Error;

pub use builder::{
    combine, convert_index, filter_by_pool, BuildConfig, BuildStats, Engine, QuerySpec, StageTimings, Universe,
};
pub use frame::{AlignedFrame, Block, FrameIndex, IndexEntry, RowKey};

use crate::cache::CacheError;
use crate::expr::{EvalError, ParseError};
use crate::storage::StorageError;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("cannot parse {text:?}: {source}")]
    Parse {
        text: String,
        #[source]
        source: ParseError,
    },
    #[error("no calendar points between {start} and {end}")]
    EmptyRange { start: NaiveDate, end: NaiveDate },
    #[error("invalid query: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}
