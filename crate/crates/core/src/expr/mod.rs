//! Factor expression language: parsing, canonical keys, look-back analysis
//! and per-instrument evaluation.

mod ast;
mod eval;
mod parser;

use thiserror::Error;

pub use ast::{BinaryOp, CanonicalKey, Expr, RollingOp, UnaryOp};
pub use eval::{evaluate, Evaluator, SeriesProvider, StoreProvider};
pub use parser::{parse, MAX_HEIGHT, MAX_WINDOW};

pub(crate) use eval::attribute_error;

use crate::storage::StorageError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function {name:?} at byte {offset}")]
    UnknownFunction { offset: usize, name: String },
    #[error("{name} at byte {offset} takes {expected} argument(s), found {found}")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("window at byte {offset} must be an integer literal in range")]
    NonIntegerWindow { offset: usize },
}

impl ParseError {
    pub(crate) fn syntax(offset: usize, message: impl Into<String>) -> Self {
        ParseError::Syntax {
            offset,
            message: message.into(),
        }
    }

    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownFunction { offset, .. }
            | ParseError::Arity { offset, .. }
            | ParseError::NonIntegerWindow { offset } => *offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("instrument {instrument} has no attribute {attribute:?}")]
    UnknownAttribute { instrument: String, attribute: String },
    #[error("invalid evaluation range [{lo}, {hi}]")]
    InvalidRange { lo: usize, hi: usize },
    #[error(transparent)]
    Storage(#[from] StorageError),
}
