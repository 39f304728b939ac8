// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use sgg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("zero-area union")]
    ZeroAreaUnion,
    #[error("zero-area enclosing box")]
    ZeroAreaEnclosing,
    #[error("inverted corners: ({x1}, {y1}, {x2}, {y2})")]
    InvertedCorners { x1: f32, y1: f32, x2: f32, y2: f32 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed record: {0}")]
    Format(String),
    #[error("hash mismatch for {path}: manifest {expected}, file {actual}")]
    HashMismatch { path: PathBuf, expected: String, actual: String },
    #[error("non-finite matching cost at layer {layer}, row {row}, col {col}")]
    NonFiniteCost { layer: usize, row: usize, col: usize },
    #[error("non-finite loss at layer {layer}, component {component}, term {term}: {detail}")]
    NonFiniteLoss { layer: usize, component: &'static str, term: &'static str, detail: String },
    #[error("no ground truth")]
    NoGroundTruth,
    #[error("layer {requested} out of range for {available} layers")]
    LayerOutOfRange { requested: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
