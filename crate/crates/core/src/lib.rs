//! # capformer
//!
//! A desk-scale transformer encoder-decoder engine for image captioning,
//! built from scratch on a reverse-mode autodiff tensor core, with the
//! standard caption metrics (BLEU, METEOR, ROUGE-L, CIDEr) used to score it.
//!
//! ```text
//! feature grid ─► encoder (self-attn + FFN stacks) ─► memory
//! token ids ───► decoder (masked self-attn, cross-attn, FFN) ─► logits
//! ```
//!
//! Images enter as precomputed feature grids (CAPF files); training minimizes
//! teacher-forced cross-entropy; captions come out of greedy or beam decoding
//! and are scored against references by the metrics module.

pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use model::{AttentionMask, ModelConfig, ModelParams};
pub use rng::RngStream;
pub use tensor::{grad_check, Mode, NodeId, Tape, Tensor};
pub use text::Vocab;
pub use train::{Checkpoint, TrainConfig};
