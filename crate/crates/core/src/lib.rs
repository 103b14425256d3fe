//! Self-supervised sleep staging from single-channel EEG: a frame network
//! feeding a masked autoencoder with a contrastive head, and a selective
//! state-space temporal context module for downstream staging.

pub mod augment;
pub mod autograd;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod frame_network;
pub mod framing;
pub mod gradcheck;
pub mod mae;
pub mod neuronet;
pub mod nn;
pub mod rng;
pub mod signal_io;
pub mod synth;
pub mod tcm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
