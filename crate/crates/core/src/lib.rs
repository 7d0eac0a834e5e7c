//! Desk-scale accident anticipation pipeline: annotation schema, clip
//! sampling, a text-to-vision shift-fusion network with driver-attention
//! reconstruction, multi-task losses, and the anticipation metric suite.

pub mod annotations;
pub mod autodiff;
pub mod checkpoint;
pub mod clip_sampler;
pub mod config;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plots;
pub mod synthdata;
pub mod tensor_io;
pub mod text;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error("invalid record {video_id}: {violations:?}")]
    InvalidRecord {
        video_id: String,
        violations: Vec<annotations::Violation>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at sample {0}")]
    NonFiniteLoss(String),
}

pub type Result<T> = std::result::Result<T, CapError>;
