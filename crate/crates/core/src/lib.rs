//! Multilingual grapheme-to-phoneme conversion with byte-level transformers.
//!
//! Words are fed as the UTF-8 bytes of `<lang>:word`, transduced by a small
//! T5-style encoder-decoder trained from scratch, decoded with beam search,
//! and scored by phone and word error rate.

pub mod checkpoint;
pub mod codec;
pub mod commands;
pub mod decode;
pub mod error;
pub mod lexicon;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synthetic;
pub mod train;

pub use codec::{LanguageTag, TokenSequence};
pub use error::{Error, ErrorKind, Result};
pub use lexicon::{Lexicon, LexiconEntry, SplitSpec};
pub use metrics::EvalReport;
pub use train::{TrainConfig, TrainReport};
pub use nn::{ModelConfig, ModelParameters};
pub use scalar::Scalar;

pub type ParamsF32 = nn::ModelParameters<f32>;
pub type ParamsF64 = nn::ModelParameters<f64>;
pub type GradientsF32 = nn::Gradients<f32>;
pub type GradientsF64 = nn::Gradients<f64>;
pub type TensorF32 = nn::Tensor<f32>;
pub type TensorF64 = nn::Tensor<f64>;
pub type AdamWF32 = optim::AdamWState<f32>;
pub type AdamWF64 = optim::AdamWState<f64>;
