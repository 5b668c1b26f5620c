//! The speech model: character vocabulary, architecture configuration,
//! parameter storage, forward-graph construction, and checkpoints.

mod checkpoint;
mod config;
mod net;
mod params;
mod vocab;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ParamEntry, Provenance, CONFIG_FILE,
    MANIFEST_FILE, PARAMS_FILE, PROVENANCE_FILE, VOCAB_FILE,
};
pub use config::ModelConfig;
pub use net::{
    joint_scalar, sinusoidal_positions, supervised_loss_nodes, EncoderOut, Network,
    SupervisedNodes,
};
pub use params::{
    add_ssl_params, init_model_params, param_specs, validate_params, Init, ParamStore,
};
pub use vocab::{Vocabulary, BLANK, FIRST_CHAR, SOS_EOS, UNK, UNK_CHAR};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        want: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("target needs {need} encoder frames but only {have} are available")]
    InfeasibleTarget { need: usize, have: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub(crate) fn json(e: serde_json::Error) -> Self {
        ModelError::Checkpoint(format!("json: {e}"))
    }
}
