//! A small dense/convolutional network engine: exact backpropagation, the
//! alpha-balanced categorical focal loss, Adam, and an early-stopping trainer.
//! Everything runs in `f64`.

mod adam;
mod io;
mod layers;
mod loss;
mod tensor;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use io::{decode_weights, encode_weights, load_weights, save_weights, sidecar_path, Manifest, TensorEntry, FORMAT_VERSION, MAGIC};
pub use layers::{backward, backward_accumulate, forward, logits_end, validate_specs, ForwardCache, LayerParams, LayerSpec, ParameterSet};
pub use loss::{cross_entropy, focal_loss, inverse_frequency_alpha, softmax, softmax_in_place, FocalConfig, PROB_FLOOR};
pub use tensor::Tensor;
pub use train::{
    argmax, batch_gradients, evaluate, train, train_with, AlphaSpec, Dataset, EpochRecord, Evaluation, Head, LossSettings,
    MultiHeadNet, Sample, TrainConfig, TrainHistory,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: {msg}")]
    Dimension { layer: usize, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("weights file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
