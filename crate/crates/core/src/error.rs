// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use numkit::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token {token} outside vocabulary of {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{what}: expected width {expected}, got {actual}")]
    Width {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("no support examples for class {0}")]
    MissingClass(String),

    #[error("training diverged at step {step}: {cause}")]
    Diverged { step: usize, cause: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed {format}: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Self::Format {
            format,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Num(_) => "numeric",
            Error::Config(_) => "config",
            Error::OutOfVocab { .. } => "out-of-vocab",
            Error::ContextOverflow { .. } => "context-overflow",
            Error::Empty(_) => "empty",
            Error::Width { .. } => "width",
            Error::MissingClass(_) => "missing-class",
            Error::Diverged { .. } => "diverged",
            Error::NonFinite(_) => "non-finite",
            Error::Format { .. } => "format",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }

    /// Pipeline stage the error came from, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// The error with any stage wrapper removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
