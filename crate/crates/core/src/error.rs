use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}: no points")]
    EmptyInput(PathBuf),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("coordinate {value} out of range for {bits}-bit curve")]
    Range { value: u32, bits: u32 },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
