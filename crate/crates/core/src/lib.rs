//! A desk-scale masked diffusion language-model laboratory.
//!
//! The crate covers the forward masking process ([`noise`]), a small
//! bidirectional transformer denoiser with exact gradients ([`denoiser`]),
//! full-sequence and response-only fine-tuning ([`training`]), iterative
//! denoising and infilling ([`sampler`]), prompt infilling with candidate
//! validation and sliding-window refinement ([`pipeline`]), and diffusion
//! perplexity plus task metrics ([`eval`]).

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod noise;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod sequence;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use sequence::{MaskingPolicy, NoisySequence, TokenSequence};
pub use vocab::{TokenId, Vocabulary};
