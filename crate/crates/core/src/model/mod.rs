//! Encoder-decoder transformer with hand-written backpropagation, AdamW
//! training, gradient checking and binary checkpoints.

mod checkpoint;
mod config;
mod gradcheck;
mod network;
mod ops;
mod optim;
mod params;
mod scalar;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use gradcheck::{
    check_gradients, relative_error, GradCheck, GradCheckReport, GradCheckSettings, TensorReport,
    TransformerLoss,
};
pub use network::{
    encode, encoder_states, forward_loss, loss_and_grad, next_token_logprobs, Batch, Encoded,
    Example, ForwardOutput,
};
pub use ops::{attention, AttentionOutput};
pub use optim::{AdamW, OptimConfig};
pub use params::{Init, ModelState, ParamLayout, TensorSpec};
pub use scalar::{gemm, DType, Scalar, View, ViewMut};
pub use train::{curve_csv, train, write_curve, LossPoint, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss or gradient at batch {batch}")]
    NonFinite { batch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
