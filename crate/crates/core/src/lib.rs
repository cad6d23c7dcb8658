//! Encoder-decoder temporal convolutional network for frame-wise action
//! segmentation of multivariate time series.
//!
//! The crate is organised bottom-up:
//!
//! - [`layers`]: temporal convolution, channel normalization, max pooling and
//!   upsampling, each with a hand-written backward pass
//! - [`network`]: encoder/decoder assembly, padding and the softmax readout
//! - [`training`]: masked cross-entropy, Adam and the training loop
//! - [`gradcheck`]: finite-difference verification of the whole gradient
//! - [`metrics`]: frame accuracy, segmental edit score and segmental mAP
//! - [`data`] and [`synth`]: CSV sequences, manifests, splits and a
//!   synthetic generator
//! - [`serialize`]: the binary model file
//! - [`config`] and [`cli`]: the `tcnseg` command-line front end

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod serialize;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Result, TcnError};
pub use network::{ModelConfig, ModelParameters, TcnModel};
pub use tensor::{Matrix, Tensor3};
pub use training::TrainConfig;
