//! From-scratch 1D convolutional residual autoencoder.
//!
//! Activations are `[B, C, L]` tensors of `f64`. Each layer has an explicit
//! backward pass; a training-mode forward records a [`Tape`] that
//! [`Autoencoder::backward`] consumes.

pub mod adam;
pub mod block;
pub mod checkpoint;
pub mod layers;
pub mod model;
mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use block::{Block, BlockConfig, ForwardMode};
pub use checkpoint::{load_model, save_model};
pub use layers::conv1d;
pub use model::{
    batch_loss, batch_loss_grad, reconstruction_error, AEConfig, Autoencoder, ForwardOutput,
    Gradients, Tape,
};
pub use tensor::Tensor;
pub use train::{train, EpochStats, TrainConfig, TrainOutcome};
