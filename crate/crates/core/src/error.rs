use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate rotation: quaternion norm {0:e} is too small")]
    DegenerateRotation(f64),

    #[error("rank-deficient alignment: {0}")]
    RankDeficient(String),

    #[error("degenerate scene: only {remaining} points survive occlusion (need at least 8)")]
    DegenerateScene { remaining: usize },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (epoch {epoch}, scene {scene}): loss = {loss}")]
    Divergence {
        step: usize,
        epoch: usize,
        scene: usize,
        loss: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
