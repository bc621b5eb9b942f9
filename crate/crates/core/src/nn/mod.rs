//! A from-scratch byte-level transformer encoder-decoder with exact gradients.
//!
//! T5 flavoured: pre-norm residual blocks with scale-only RMS normalization,
//! a learned relative-position bias per stack added to the attention logits,
//! ReLU feed-forward layers, and one embedding matrix shared by the encoder
//! input, the decoder input and the output projection.

mod batch;
mod config;
pub mod incremental;
mod model;
mod ops;
mod params;
mod position;
mod tensor;

pub use batch::Batch;
pub use config::ModelConfig;
pub use model::{
    backward, backward_sum, cross_entropy_loss, forward, forward_traced, AttentionTrace, Logits,
    Mode,
};
pub use params::{Attention, DecoderLayer, EncoderLayer, FeedForward, Gradients, ModelParameters};
pub use position::relative_position_bucket;
pub use tensor::{matmul, Tensor};
