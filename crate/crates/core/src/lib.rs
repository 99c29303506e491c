//! Multimodal compact bilinear (MCB) pooling and an attention-based
//! encoder-decoder translation model that fuses a source sentence with a
//! spatial image feature map.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – dense tensors, FFT (radix-2 and Bluestein), circular
//!   convolution, softmax.
//! * [`sketch`] – Count Sketch and Tensor Sketch pooling with exact gradients.
//! * [`layers`] – embedding, dense, LSTM cell, bi-directional encoder and the
//!   position-wise convolution used by pre-attention.
//! * [`attention`] – additive soft attention, the four fusion strategies and
//!   the grid pre-attention pass.
//! * [`model`] – the full encoder-decoder with teacher-forced loss, its
//!   gradient and greedy decoding.
//! * [`train`] – Xavier init, Adam with coupled L2 and the early-stopping
//!   training loop.
//! * [`data`] – tokenizer, vocabulary, MMFM feature files, checkpoints and the
//!   synthetic grounded translation task.
//! * [`bleu`] and [`sketch_bench`] – evaluation utilities.

pub mod attention;
pub mod bleu;
pub mod data;
mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod sketch;
pub mod sketch_bench;
pub mod train;

pub use attention::{FusionKind, FusionStrategy};
pub use data::{Example, Vocab};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelParams};
pub use numerics::{ComplexVector, Tensor};
pub use sketch::{McbPooler, SketchParams};
pub use train::{AdamState, TrainConfig};
