//! Contrast-invariant segmentation across multi-echo MR contrasts.
//!
//! Two-stage training on a synthetic mono-exponential decay phantom:
//! masked-autoencoder pretraining over unlabeled echoes, then
//! teacher-student masked pseudo-label adaptation from a labeled source
//! echo to an unlabeled target echo, with global-local feature fusion and
//! cross-echo semantic consistency. Overlap and boundary metrics come with
//! brute-force oracles so the accelerated paths can be verified exactly.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod dataprep;
pub mod evalrun;
pub mod losses;
pub mod mae;
pub mod metrics;
pub mod mpl;
pub mod networks;
pub mod phantom;
pub mod report;
pub mod viz;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("split hygiene violation: {0}")]
    SplitOverlap(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at step {0}; aborting")]
    NonFiniteLoss(u64),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
