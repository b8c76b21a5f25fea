//! Merged text + EEG vocabulary and the byte-level text codec.
//!
//! Id layout: text tokens first, then [SEP], [END], PAD, then the K EEG
//! codes. With the default byte-level codec the text region is 256 ids,
//! so V_t = 259 and EEG code k maps to 259 + k.

use std::path::Path;

use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Hard ceiling on the merged vocabulary, guarding the embedding table.
pub const MAX_VOCAB: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedVocab {
    /// Number of plain text tokens (256 for byte level).
    text_tokens: usize,
    /// Number of EEG codes.
    k: usize,
}

impl MergedVocab {
    pub fn new(text_tokens: usize, k: usize) -> Result<Self> {
        if text_tokens == 0 || k == 0 {
            return Err(TensorError::InvalidArg {
                op: "build_merged_vocab",
                detail: "text vocabulary and codebook must be non-empty".into(),
            });
        }
        let total = text_tokens + 3 + k;
        if total > MAX_VOCAB {
            return Err(TensorError::InvalidArg {
                op: "build_merged_vocab",
                detail: format!("merged vocabulary of {total} overflows the table cap {MAX_VOCAB}"),
            });
        }
        Ok(MergedVocab { text_tokens, k })
    }

    pub fn byte_level(k: usize) -> Result<Self> {
        Self::new(256, k)
    }

    pub fn sep(&self) -> u32 {
        self.text_tokens as u32
    }

    pub fn end(&self) -> u32 {
        self.text_tokens as u32 + 1
    }

    pub fn pad(&self) -> u32 {
        self.text_tokens as u32 + 2
    }

    /// Text region size including the three specials (V_t).
    pub fn text_total(&self) -> usize {
        self.text_tokens + 3
    }

    pub fn n_codes(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> usize {
        self.text_total() + self.k
    }

    /// Merged id of EEG code `k`.
    pub fn eeg_id(&self, code: u32) -> Result<u32> {
        if (code as usize) < self.k {
            Ok(self.text_total() as u32 + code)
        } else {
            Err(TensorError::InvalidArg {
                op: "merged_vocab",
                detail: format!("code {code} out of range for {} codes", self.k),
            })
        }
    }

    /// Inverse of `eeg_id`.
    pub fn code_of(&self, id: u32) -> Option<u32> {
        let base = self.text_total() as u32;
        if id >= base && (id - base) < self.k as u32 {
            Some(id - base)
        } else {
            None
        }
    }

    pub fn is_text_or_special(&self, id: u32) -> bool {
        (id as usize) < self.text_total()
    }
}

/// Text tokenizer: byte-level by default, or a loadable token list with
/// greedy longest-match encoding.
#[derive(Debug, Clone)]
pub enum TextCodec {
    Bytes,
    Vocab(Vec<String>),
}

impl TextCodec {
    pub fn bytes() -> Self {
        TextCodec::Bytes
    }

    /// Load one token per line. Tokens must be non-empty; every character
    /// a caller encodes must be reachable through some token.
    pub fn from_token_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TensorError::InvalidArg {
            op: "text_codec",
            detail: format!("cannot read vocabulary {path:?}: {e}"),
        })?;
        let tokens: Vec<String> =
            text.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()).collect();
        if tokens.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "text_codec",
                detail: "empty vocabulary file".into(),
            });
        }
        Ok(TextCodec::Vocab(tokens))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            TextCodec::Bytes => 256,
            TextCodec::Vocab(tokens) => tokens.len(),
        }
    }

    pub fn encode(&self, s: &str) -> Result<Vec<u32>> {
        match self {
            TextCodec::Bytes => Ok(s.bytes().map(u32::from).collect()),
            TextCodec::Vocab(tokens) => {
                let mut out = Vec::new();
                let mut rest = s;
                while !rest.is_empty() {
                    let mut best: Option<(usize, usize)> = None; // (token idx, len)
                    for (i, t) in tokens.iter().enumerate() {
                        if rest.starts_with(t.as_str())
                            && best.map_or(true, |(_, l)| t.len() > l)
                        {
                            best = Some((i, t.len()));
                        }
                    }
                    match best {
                        Some((i, l)) => {
                            out.push(i as u32);
                            rest = &rest[l..];
                        }
                        None => {
                            return Err(TensorError::InvalidArg {
                                op: "text_codec",
                                detail: format!("cannot encode at {:?}", &rest[..rest.len().min(8)]),
                            })
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            TextCodec::Bytes => {
                let bytes: Vec<u8> = ids.iter().map(|&i| i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            TextCodec::Vocab(tokens) => ids
                .iter()
                .filter_map(|&i| tokens.get(i as usize).map(String::as_str))
                .collect(),
        }
    }
}
