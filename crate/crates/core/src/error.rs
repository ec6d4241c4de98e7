use std::io;

use thiserror::Error;

/// Errors raised anywhere in the tagging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label string {0:?}")]
    InvalidLabel(String),

    #[error("invalid span {category}[{start},{end}) for sentence of length {length}: {reason}")]
    InvalidSpan {
        category: String,
        start: usize,
        end: usize,
        length: usize,
        reason: &'static str,
    },

    #[error("ungrammatical BIOES sequence at position {position}: {detail}")]
    Grammar { position: usize, detail: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of length {length} exceeds max_sequence {max}")]
    SequenceTooLong { length: usize, max: usize },

    #[error("empty lattice")]
    EmptyLattice,

    #[error("length mismatch in sentence {sentence}: expected {expected}, found {found}")]
    LengthMismatch {
        sentence: usize,
        expected: usize,
        found: usize,
    },

    #[error("forward cache is stale: parameters changed since the forward pass")]
    StaleCache,

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    Divergence {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
