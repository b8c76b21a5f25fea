//! Decoder-only causal transformer over the merged text + EEG vocabulary.
//! EEG positions are fed as frozen-encoder patch embeddings through a
//! linear adapter (identity when the widths already match) plus shared
//! temporal and new spatial embeddings; text positions use the ordinary
//! token + position tables.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::registry;
use crate::nn::{self, AttentionMaps, Bound, ParamSet, StackConfig};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

use super::mask::AttnMask;
use super::vocab::MergedVocab;

#[derive(Debug, Clone)]
pub struct LMConfig {
    pub stack: StackConfig,
    pub max_seq: usize,
    pub variant: String,
    pub tied_head: bool,
    /// Attention capture refuses sequences longer than this.
    pub capture_max_seq: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LMConfig {
    pub fn desk() -> Self {
        LMConfig {
            stack: StackConfig { layers: 4, hidden: 64, heads: 4, mlp: 256 },
            max_seq: 1024,
            variant: "desk".into(),
            tied_head: false,
            capture_max_seq: 512,
        }
    }

    /// Named presets. `b`, `l`, and `xl` mirror the published full-scale
    /// shapes; only `desk` is intended to be trained here.
    pub fn preset(name: &str) -> Option<Self> {
        let (layers, hidden, heads, mlp) = match name {
            "desk" => return Some(Self::desk()),
            "b" => (12, 768, 12, 3072),
            "l" => (24, 1024, 16, 4096),
            "xl" => (48, 1600, 25, 6400),
            _ => return None,
        };
        Some(LMConfig {
            stack: StackConfig { layers, hidden, heads, mlp },
            max_seq: 1024,
            variant: name.into(),
            tied_head: false,
            capture_max_seq: 512,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        if self.max_seq == 0 {
            return Err(TensorError::InvalidArg {
                op: "lm_config",
                detail: "max_seq must be positive".into(),
            });
        }
        Ok(())
    }
}

/// What one sequence position carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionKind {
    Text { token: u32 },
    Eeg { row: usize, channel: u16, time: u32 },
    Pad,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqPosition {
    pub kind: PositionKind,
    /// Index into the shared position-embedding table.
    pub pos_index: u32,
    /// Merged-vocab id this position must predict; `None` excludes it from
    /// the loss.
    pub target: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub positions: Vec<SeqPosition>,
    pub mask: AttnMask,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_eeg_rows(&self) -> usize {
        self.positions
            .iter()
            .filter(|p| matches!(p.kind, PositionKind::Eeg { .. }))
            .count()
    }

    /// Targets in `cross_entropy_masked` form.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.positions.iter().map(|p| p.target.map(|t| t as usize)).collect()
    }

    pub fn validate(&self, vocab: &MergedVocab, max_seq: usize) -> Result<()> {
        if self.positions.len() > max_seq {
            return Err(TensorError::InvalidArg {
                op: "token_sequence",
                detail: format!("{} positions exceed max {max_seq}", self.positions.len()),
            });
        }
        if self.mask.size() != self.positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "token_sequence",
                detail: format!("mask {} vs {} positions", self.mask.size(), self.positions.len()),
            });
        }
        let mut next_row = 0usize;
        for (i, p) in self.positions.iter().enumerate() {
            if p.pos_index as usize >= max_seq {
                return Err(TensorError::InvalidArg {
                    op: "token_sequence",
                    detail: format!("position index {} at {i} exceeds max {max_seq}", p.pos_index),
                });
            }
            match &p.kind {
                PositionKind::Text { token } => {
                    if *token as usize >= vocab.total() {
                        return Err(TensorError::InvalidArg {
                            op: "token_sequence",
                            detail: format!("token id {token} out of vocabulary"),
                        });
                    }
                }
                PositionKind::Eeg { row, channel, .. } => {
                    if *row != next_row {
                        return Err(TensorError::InvalidArg {
                            op: "token_sequence",
                            detail: format!("EEG rows must be contiguous; got {row} want {next_row}"),
                        });
                    }
                    next_row += 1;
                    if registry::channel_name(*channel).is_none() {
                        return Err(TensorError::InvalidArg {
                            op: "token_sequence",
                            detail: format!("unknown channel id {channel}"),
                        });
                    }
                }
                PositionKind::Pad => {
                    if p.target.is_some() {
                        return Err(TensorError::InvalidArg {
                            op: "token_sequence",
                            detail: format!("PAD at {i} must not carry loss"),
                        });
                    }
                }
            }
            if let Some(t) = p.target {
                if t as usize >= vocab.total() {
                    return Err(TensorError::InvalidArg {
                        op: "token_sequence",
                        detail: format!("target id {t} out of vocabulary"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LanguageModel<S> {
    pub cfg: LMConfig,
    pub vocab: MergedVocab,
    /// Width of the frozen encoder embeddings arriving at the adapter.
    pub d_enc: usize,
    pub params: ParamSet<S>,
}

impl<S: Scalar> LanguageModel<S> {
    pub fn init(cfg: LMConfig, vocab: MergedVocab, d_enc: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.stack.hidden;
        let mut ps = ParamSet::new();
        ps.insert("wte", Tensor::randn(&[vocab.total(), d], nn::INIT_STD, &mut rng));
        ps.insert("wpe", Tensor::randn(&[cfg.max_seq, d], nn::INIT_STD, &mut rng));
        ps.insert("wse", Tensor::randn(&[registry::CHANNELS.len(), d], nn::INIT_STD, &mut rng));
        if d_enc != d {
            nn::init_linear(&mut ps, "adapter", d_enc, d, nn::INIT_STD, &mut rng);
        }
        nn::init_stack(&mut ps, "lm", &cfg.stack, &mut rng);
        if !cfg.tied_head {
            nn::init_linear(&mut ps, "head", d, vocab.total(), nn::INIT_STD, &mut rng);
        }
        Ok(LanguageModel { cfg, vocab, d_enc, params: ps })
    }

    /// Rows of the token table covering text tokens and specials, i.e. the
    /// pool the adversarial stage samples text embeddings from.
    pub fn text_embedding_table(&self) -> Tensor<S> {
        let wte = self.params.get("wte");
        let d = self.cfg.stack.hidden;
        let n = self.vocab.text_total();
        let data = wte.data()[..n * d].to_vec();
        Tensor::new(vec![n, d], data).expect("table slice")
    }

    /// Assemble `[S, hidden]` input embeddings for a sequence. `eeg_h`
    /// holds the frozen-encoder rows referenced by EEG positions.
    pub fn embed_on(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        seq: &TokenSequence,
        eeg_h: Option<Var>,
    ) -> Result<Var> {
        seq.validate(&self.vocab, self.cfg.max_seq)?;
        let n_eeg = seq.n_eeg_rows();
        if n_eeg > 0 {
            let h = eeg_h.ok_or_else(|| TensorError::InvalidArg {
                op: "embed_sequence",
                detail: "sequence has EEG positions but no embeddings were provided".into(),
            })?;
            let hs = tape.shape(h);
            if hs.len() != 2 || hs[0] != n_eeg || hs[1] != self.d_enc {
                return Err(TensorError::ShapeMismatch {
                    op: "embed_sequence",
                    detail: format!("EEG rows {:?}, expected [{n_eeg}, {}]", hs, self.d_enc),
                });
            }
        }

        // adapter over all EEG rows at once
        let adapted = match (n_eeg, self.d_enc == self.cfg.stack.hidden) {
            (0, _) => None,
            (_, true) => eeg_h,
            (_, false) => Some(nn::linear(tape, bound, "adapter", eeg_h.unwrap())?),
        };

        // group consecutive positions into lookup runs and EEG runs
        enum Run {
            Lookup { ids: Vec<usize>, pos: Vec<usize> },
            Eeg { start_row: usize, len: usize, pos: Vec<usize>, chans: Vec<usize> },
        }
        let mut runs: Vec<Run> = Vec::new();
        for p in &seq.positions {
            match &p.kind {
                PositionKind::Text { token } => {
                    let (id, pos) = (*token as usize, p.pos_index as usize);
                    match runs.last_mut() {
                        Some(Run::Lookup { ids, pos: ps }) => {
                            ids.push(id);
                            ps.push(pos);
                        }
                        _ => runs.push(Run::Lookup { ids: vec![id], pos: vec![pos] }),
                    }
                }
                PositionKind::Pad => {
                    let (id, pos) = (self.vocab.pad() as usize, p.pos_index as usize);
                    match runs.last_mut() {
                        Some(Run::Lookup { ids, pos: ps }) => {
                            ids.push(id);
                            ps.push(pos);
                        }
                        _ => runs.push(Run::Lookup { ids: vec![id], pos: vec![pos] }),
                    }
                }
                PositionKind::Eeg { row, channel, time } => {
                    let (pos, chan) = (*time as usize, *channel as usize);
                    match runs.last_mut() {
                        Some(Run::Eeg { start_row, len, pos: ps, chans }) if *start_row + *len == *row => {
                            *len += 1;
                            ps.push(pos);
                            chans.push(chan);
                        }
                        _ => runs.push(Run::Eeg {
                            start_row: *row,
                            len: 1,
                            pos: vec![pos],
                            chans: vec![chan],
                        }),
                    }
                }
            }
        }

        let mut parts = Vec::with_capacity(runs.len());
        for run in runs {
            match run {
                Run::Lookup { ids, pos } => {
                    let tok = tape.embedding(bound.var("wte"), &ids)?;
                    let pe = tape.embedding(bound.var("wpe"), &pos)?;
                    parts.push(tape.add(tok, pe)?);
                }
                Run::Eeg { start_row, len, pos, chans } => {
                    let h = adapted.expect("validated above");
                    let rows = tape.slice(h, 0, start_row, len)?;
                    let pe = tape.embedding(bound.var("wpe"), &pos)?;
                    let se = tape.embedding(bound.var("wse"), &chans)?;
                    let with_pos = tape.add(rows, pe)?;
                    parts.push(tape.add(with_pos, se)?);
                }
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts, 0)
        }
    }

    /// Full forward pass to logits `[S, vocab_total]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        seq: &TokenSequence,
        eeg_h: Option<Var>,
        capture: Option<&mut AttentionMaps<S>>,
    ) -> Result<Var> {
        let x = self.embed_on(tape, bound, seq, eeg_h)?;
        let mask = tape.constant(seq.mask.to_tensor())?;
        let y = nn::stack_forward(tape, bound, "lm", &self.cfg.stack, x, mask, capture)?;
        if self.cfg.tied_head {
            tape.matmul_t(y, bound.var("wte"), false, true)
        } else {
            nn::linear(tape, bound, "head", y)
        }
    }

    /// Inference logits on a fresh tape.
    pub fn logits(&self, seq: &TokenSequence, eeg_h: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let h = eeg_h.map(|t| tape.constant(t.clone())).transpose()?;
        let out = self.forward_on(&mut tape, &bound, seq, h, None)?;
        Ok(tape.value(out).clone())
    }

    /// Inference with per-layer, per-head attention maps. Refuses
    /// sequences longer than the configured capture cap.
    pub fn logits_with_attention(
        &self,
        seq: &TokenSequence,
        eeg_h: Option<&Tensor<S>>,
    ) -> Result<(Tensor<S>, AttentionMaps<S>)> {
        if seq.len() > self.cfg.capture_max_seq {
            return Err(TensorError::InvalidArg {
                op: "capture_attention",
                detail: format!(
                    "sequence of {} exceeds the capture cap {}",
                    seq.len(),
                    self.cfg.capture_max_seq
                ),
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let h = eeg_h.map(|t| tape.constant(t.clone())).transpose()?;
        let mut maps = AttentionMaps::new();
        let out = self.forward_on(&mut tape, &bound, seq, h, Some(&mut maps))?;
        Ok((tape.value(out).clone(), maps))
    }
}

/// Plain text sequence with the causal mask and shift-by-one targets
/// (training) or no targets (scoring).
pub fn text_sequence(ids: &[u32], with_targets: bool) -> Result<TokenSequence> {
    if ids.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "text_sequence",
            detail: "empty text".into(),
        });
    }
    let positions = ids
        .iter()
        .enumerate()
        .map(|(i, &token)| SeqPosition {
            kind: PositionKind::Text { token },
            pos_index: i as u32,
            target: if with_targets && i + 1 < ids.len() { Some(ids[i + 1]) } else { None },
        })
        .collect();
    Ok(TokenSequence { positions, mask: AttnMask::causal(ids.len())? })
}
