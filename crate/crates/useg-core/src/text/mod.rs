//! Text tower: caption tokenizer, closed-corpus vocabulary, and a small
//! contextual encoder that mean-pools per-token embeddings into one
//! fixed-size vector per caption.
//!
//! The encoder is trained from scratch together with the segmentation
//! network; captions come from a closed grammar, so a word-level
//! vocabulary with a single unknown id covers every input.

use thiserror::Error;

pub mod encoder;
pub mod vocab;

pub use encoder::{encode_text, init_text_params, TextConfig};
pub use vocab::{
    detokenize, split_tokens, tokenize, TokenSequence, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID,
    UNK_TOKEN,
};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("text is empty after trimming")]
    EmptyText,
    #[error("token sequence mask is all zero")]
    AllPadded,
    #[error("token sequence length {got} does not match configured length {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("encode_text called with an empty batch")]
    EmptyBatch,
    #[error("corrupt vocabulary: {0}")]
    CorruptVocabulary(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TextError>;
