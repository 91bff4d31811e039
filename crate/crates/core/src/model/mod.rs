//! Client-side model: weights, the surrogate classifier, local data and
//! checkpoint persistence.

use std::path::PathBuf;

use thiserror::Error;

pub mod checkpoint;
pub mod data;
pub mod surrogate;
pub mod weights;

pub use checkpoint::{decode_container, encode_container, Checkpoint};
pub use data::{LocalDataset, MixtureTask, Samples};
pub use surrogate::{
    error_rate, evaluate, init_weights, train_local, LocalTrainConfig, SurrogateShape,
};
pub use weights::{
    describe_weights, flatten_weights, load_flat_weights, manifest_len, FlatWeights, ModelWeights,
    TensorSpec,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("tensor {node}: shape {shape:?} is not a valid tensor shape")]
    InvalidShape { node: String, shape: Vec<usize> },
    #[error("duplicate node name {0}")]
    DuplicateNode(String),
    #[error("tensor {node}: manifest says {expected} elements, found {actual}")]
    TensorMismatch {
        node: String,
        expected: usize,
        actual: usize,
    },
    #[error("flat weights have {actual} values, manifest needs {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e.to_string())
    }
}
