//! Scale-aware prompt decoder.

mod blocks;
mod embed;
mod net;

use rand::Rng;

pub use blocks::{CrossLayer, MaskHead, TransformerBlock};
pub use embed::{
    clamp_scale, positional_encoding, FilmLayer, PositionalEncoding, ScaleEmbedding, FILM_GATE_INIT, PE_FREQ_RANGE,
    SCALE_FREQ_RANGE,
};
pub use net::{select_anchors, Decoder, DecoderCache, DecoderConfig};

pub const DEFAULT_SCALE_DROPOUT: f64 = 0.1;

/// A point prompt with an optional scale prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptQuery {
    pub index: usize,
    pub scale: Option<f32>,
}

impl PromptQuery {
    pub fn new(index: usize, scale: Option<f32>) -> Self {
        Self { index, scale }
    }
}

/// Drops the scale prompt with probability `p_drop`.
pub fn scale_dropout<R: Rng>(s: f32, p_drop: f64, rng: &mut R) -> Option<f32> {
    if rng.random_bool(p_drop.clamp(0.0, 1.0)) {
        None
    } else {
        Some(s)
    }
}
