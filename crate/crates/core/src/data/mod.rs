//! Vocabulary, tokenization, parallel corpora and length-bucketed batches.

mod batch;
mod corpus;
mod toy;
mod vocab;

pub use batch::{make_batches, Batch, Batching};
pub use corpus::{ParallelCorpus, Provenance, SentencePair};
pub use toy::{ToySpec, ToyTask};
pub use vocab::{build_vocab, Tokenizer, Vocabulary, Whitespace, PAD, UNK};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("source has {source_lines} lines but target has {target_lines}")]
    LineCountMismatch { source_lines: usize, target_lines: usize },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
