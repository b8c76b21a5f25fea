//! Language-model backbone: merged vocabulary, attention masks, and the
//! decoder-only transformer consuming text tokens and frozen EEG patch
//! embeddings.

pub mod mask;
pub mod model;
pub mod vocab;

pub use mask::AttnMask;
pub use model::{
    text_sequence, LMConfig, LanguageModel, PositionKind, SeqPosition, TokenSequence,
};
pub use vocab::{MergedVocab, TextCodec};
