//! Parameters, layers, optimiser and checkpoints on top of [`crate::autograd`].

mod checkpoint;
mod layers;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, TensorManifest};
pub use layers::{BatchNorm1d, Conv1d, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamKind, ParamStore};
