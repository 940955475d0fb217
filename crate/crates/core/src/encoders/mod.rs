//! Toy text and image encoders: word-level tokenizer, causal transformer
//! text tower, and a convolutional image tower.

mod image_encoder;
pub(crate) mod text;
mod vocab;

pub use image_encoder::ImageEncoder;
pub(crate) use image_encoder::conv;
pub use text::{EmbeddingSequence, HiddenSequence, Sequence, TextEncoder};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD};
