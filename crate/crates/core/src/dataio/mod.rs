//! Binary file formats (recordings, checkpoints, token grids, attention
//! dumps), instruction manifests, and the synthetic generators that stand
//! in for a clinical corpus at desk scale. All formats are little-endian,
//! versioned, and magic-guarded; round trips are bit-exact.

pub mod checkpoint;
pub mod manifest;
pub mod recording;
pub mod registry;
pub mod synth;
pub mod textgen;
pub mod tokens;

pub use checkpoint::{Checkpoint, Section};
pub use manifest::{read_instruction_manifest, write_manifest, ManifestDataset, ManifestEntry};
pub use recording::{read_recording, write_recording};
pub use synth::{bandpower, bandpower_classifier_accuracy, synth_generate, ClassSignature, LabeledWindow, SynthTaskSpec};
pub use textgen::synth_text;
pub use tokens::{read_attention_dump, read_token_grid, write_attention_dump, write_token_grid, AttentionDump, TokenGridFile};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("manifest line {line}: {detail}")]
    ManifestLine { line: usize, detail: String },
    #[error("class signatures at {0} Hz and {1} Hz overlap; task not separable")]
    OverlappingSignatures(f64, f64),
    #[error("missing checkpoint section {0}")]
    MissingSection(String),
    #[error("checkpoint does not match the configured model: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, DataIoError>;
