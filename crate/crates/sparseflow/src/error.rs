//! Error types shared across the pipeline.
//!
//! Contract violations (shape mismatches, out-of-range indices, invalid
//! hyperparameters) panic with a message carrying the offending values;
//! data-dependent and I/O failures are reported through [`FlowError`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    /// Preprocessing filters removed every point of a cloud.
    #[error("empty scene: no points survive the depth/ground filters")]
    EmptyScene,

    /// The displacement gate masks every source/target pair.
    #[error("no admissible correspondence: every pair exceeds the displacement gate")]
    NoCorrespondence,

    /// The occlusion mask excludes every point of a supervision batch.
    #[error("degenerate batch: the supervision mask excludes every point")]
    DegenerateBatch,

    /// Training produced a non-finite loss.
    #[error("non-finite loss on scene `{scene}`")]
    NonFiniteLoss { scene: String },

    /// No admissible permutation exists for the assignment oracle.
    #[error("assignment oracle: no admissible permutation under the mask")]
    NoAssignment,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// Structural problems in scene data (row-count mismatches, missing files).
    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
