use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: index {index} out of range for table of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("load error: {0}")]
    Load(String),

    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("split `{split}` has {frames} frames, fewer than the {needed} needed for one window")]
    EmptySplit {
        split: &'static str,
        frames: usize,
        needed: usize,
    },

    #[error("evaluation split is empty")]
    EmptyEvaluation,

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
