//! The multimodal network: patch image encoder, projector to soft prefix tokens,
//! and a causal transformer LM whose output head is tied to the token embeddings.

mod forward;
mod infer;
mod params;

pub use forward::{contrastive_loss, Bound, LmInput, LmOutput};
pub use infer::{Constraint, DecodeMode, GenerationConfig, InferenceSession};
pub use params::{
    BlockSlots, Model, ParamGroup, ParamSet, Slots, INIT_TEMPERATURE, TEMPERATURE_RANGE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of {needed} positions exceeds context length {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    InvalidToken { id: u32, size: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_img: usize,
    pub encoder_layers: usize,
    pub n_prefix: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 256,
            image_size: 32,
            channels: 3,
            patch_size: 8,
            d_img: 64,
            encoder_layers: 2,
            n_prefix: 8,
            vocab_size: crate::tokenizer::Vocabulary::new().size(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_img == 0 || self.d_img % self.n_heads != 0 {
            return bad("d_img must be a positive multiple of n_heads");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be divisible by patch_size");
        }
        if self.n_prefix == 0 || self.n_prefix >= self.context_len {
            return bad("n_prefix must be in 1..context_len");
        }
        if self.vocab_size <= crate::tokenizer::BYTE_TOKENS as usize {
            return bad("vocab_size must cover the byte tokens");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}
