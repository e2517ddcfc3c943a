use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query row {row} has no unmasked key")]
    FullyMaskedRow { row: usize },

    #[error("sequence length {seq_len} cannot be split across {devices} devices{hint}")]
    Partition {
        seq_len: usize,
        devices: usize,
        hint: &'static str,
    },

    #[error("backward pass requested before forward statistics exist on device {device}")]
    ForwardNotRun { device: usize },

    #[error("ring desynchronized at device {device}: {detail}")]
    RingDesync { device: usize, detail: String },

    #[error("deadlock: no progress for {idle} virtual time units (horizon {horizon}); {detail}")]
    Deadlock {
        idle: f64,
        horizon: f64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
