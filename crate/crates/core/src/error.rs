use tdfn_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::IdxError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("expected a {expected} input, got shape {got:?}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("region {region} out of range for {regions} regions")]
    Region { region: usize, regions: usize },
    #[error("channel {channel} out of range for {channels} channels")]
    Channel { channel: usize, channels: usize },
    #[error("position {position} out of range for a table of {len}")]
    Position { position: usize, len: usize },
    #[error("work memory: {0}")]
    Memory(String),
    #[error("every region has already been visited")]
    RegionsExhausted,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
