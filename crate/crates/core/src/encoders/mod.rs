//! Uni-modal encoders with the toy tokenizer and patchifier.

mod encoder;
mod image;
mod vocab;

pub use encoder::{EncoderOutput, ImageEncoder, TextEncoder};
pub use image::{Image, PatchGrid};
pub use vocab::{
    TokenVocab, TokenizedText, CLS_ID, FILLER, NAMES, NEGATIVE_WORDS, PAD_ID, PLACES, POSITIVE_WORDS,
};

#[cfg(test)]
mod tests;
