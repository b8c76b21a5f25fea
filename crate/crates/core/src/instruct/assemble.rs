//! Sequence assembly for instruction tuning: `[EEG][SEP][question][answer]
//! [END]` with the stair mask inside the EEG block, causal attention over
//! text, text attending to all EEG positions, and loss on the answer plus
//! the terminating [END] only.

use crate::lm::{AttnMask, MergedVocab, PositionKind, SeqPosition, TokenSequence};
use crate::mcar::McarSample;
use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Flat layout bookkeeping for an assembled instruction sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructLayout {
    pub n_eeg: usize,
    /// Flat index of [SEP].
    pub sep_at: usize,
    /// Flat index of the first answer token.
    pub answer_at: usize,
    /// Flat index of [END].
    pub end_at: usize,
    pub len: usize,
}

/// Assemble one example. `prompt_ids`/`answer_ids` are text-codec ids
/// (strictly below the specials). Optional `pad_to` appends PAD positions.
pub fn assemble_sequence(
    eeg: &McarSample,
    prompt_ids: &[u32],
    answer_ids: &[u32],
    vocab: &MergedVocab,
    max_seq: usize,
    pad_to: Option<usize>,
) -> Result<(TokenSequence, InstructLayout)> {
    if answer_ids.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "assemble_sequence",
            detail: "empty answer".into(),
        });
    }
    let c = eeg.grid.n_channels;
    let n = eeg.grid.n_patches;
    let n_eeg = c * n;
    let text_len = 1 + prompt_ids.len() + answer_ids.len() + 1; // SEP .. END
    let body = n_eeg + text_len;
    let total = pad_to.unwrap_or(body).max(body);
    if total > max_seq {
        return Err(TensorError::InvalidArg {
            op: "assemble_sequence",
            detail: format!("sequence of {total} exceeds the maximum length {max_seq}"),
        });
    }

    let layout = InstructLayout {
        n_eeg,
        sep_at: n_eeg,
        answer_at: n_eeg + 1 + prompt_ids.len(),
        end_at: n_eeg + 1 + prompt_ids.len() + answer_ids.len(),
        len: total,
    };

    // token stream of the text part, used for next-token targets
    let mut text_tokens = Vec::with_capacity(text_len);
    text_tokens.push(vocab.sep());
    text_tokens.extend_from_slice(prompt_ids);
    text_tokens.extend_from_slice(answer_ids);
    text_tokens.push(vocab.end());

    let mut positions = Vec::with_capacity(total);
    for t in 0..n {
        for ch in 0..c {
            positions.push(SeqPosition {
                kind: PositionKind::Eeg {
                    row: t * c + ch,
                    channel: eeg.channel_ids[ch],
                    time: t as u32,
                },
                pos_index: t as u32,
                target: None,
            });
        }
    }
    for (i, &tok) in text_tokens.iter().enumerate() {
        let flat = n_eeg + i;
        // loss exactly on the answer tokens and the [END]
        let target = text_tokens.get(i + 1).copied().filter(|_| {
            let predicted_flat = flat + 1;
            predicted_flat >= layout.answer_at && predicted_flat <= layout.end_at
        });
        positions.push(SeqPosition {
            kind: PositionKind::Text { token: tok },
            pos_index: (n + i) as u32,
            target,
        });
    }
    for i in body..total {
        positions.push(SeqPosition {
            kind: PositionKind::Pad,
            pos_index: (n + text_len + (i - body)) as u32,
            target: None,
        });
    }

    let mask = AttnMask::from_fn(total, |q, k| {
        let q_pad = q >= body;
        let k_pad = k >= body;
        if q_pad || k_pad {
            return false;
        }
        match (q < n_eeg, k < n_eeg) {
            (true, true) => (k / c) <= (q / c), // stair within the EEG block
            (false, true) => true,              // text sees all EEG
            (true, false) => false,             // EEG never sees text
            (false, false) => k <= q,           // causal over text
        }
    });

    Ok((TokenSequence { positions, mask }, layout))
}

/// Prompt-only hybrid sequence used by free-running decoding:
/// `[EEG][text_tokens...]` with no targets. `text_tokens` must begin with
/// [SEP].
pub fn hybrid_prompt_sequence(
    eeg: &McarSample,
    text_tokens: &[u32],
    max_seq: usize,
) -> Result<TokenSequence> {
    let c = eeg.grid.n_channels;
    let n = eeg.grid.n_patches;
    let n_eeg = c * n;
    let total = n_eeg + text_tokens.len();
    if total > max_seq {
        return Err(TensorError::InvalidArg {
            op: "hybrid_prompt_sequence",
            detail: format!("sequence of {total} exceeds the maximum length {max_seq}"),
        });
    }
    let mut positions = Vec::with_capacity(total);
    for t in 0..n {
        for ch in 0..c {
            positions.push(SeqPosition {
                kind: PositionKind::Eeg {
                    row: t * c + ch,
                    channel: eeg.channel_ids[ch],
                    time: t as u32,
                },
                pos_index: t as u32,
                target: None,
            });
        }
    }
    for (i, &tok) in text_tokens.iter().enumerate() {
        positions.push(SeqPosition {
            kind: PositionKind::Text { token: tok },
            pos_index: (n + i) as u32,
            target: None,
        });
    }
    let mask = AttnMask::from_fn(total, |q, k| match (q < n_eeg, k < n_eeg) {
        (true, true) => (k / c) <= (q / c),
        (false, true) => true,
        (true, false) => false,
        (false, false) => k <= q,
    });
    Ok(TokenSequence { positions, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tokenizer::TokenGrid;

    fn eeg(c: usize, n: usize) -> McarSample {
        McarSample {
            h: Tensor::zeros(&[c * n, 4]),
            grid: TokenGrid {
                n_channels: c,
                n_patches: n,
                indices: vec![0; c * n],
            },
            channel_ids: (0..c as u16).collect(),
        }
    }

    #[test]
    fn layout_and_length() {
        // C=2, N=3 EEG + 10 text tokens -> 6 + 1 + 10 before PAD, plus
        // answer and END
        let vocab = MergedVocab::byte_level(8).unwrap();
        let prompt: Vec<u32> = (0..10).collect();
        let answer = [65u32, 66];
        let (seq, layout) =
            assemble_sequence(&eeg(2, 3), &prompt, &answer, &vocab, 64, None).unwrap();
        assert_eq!(layout.n_eeg, 6);
        assert_eq!(layout.sep_at, 6);
        assert_eq!(layout.answer_at, 17);
        assert_eq!(layout.end_at, 19);
        assert_eq!(seq.len(), 20);
    }

    #[test]
    fn loss_mask_cardinality_is_answer_len_plus_one() {
        let vocab = MergedVocab::byte_level(8).unwrap();
        let prompt: Vec<u32> = (0..7).collect();
        let answer = [89u32, 101, 115]; // "Yes"
        let (seq, layout) =
            assemble_sequence(&eeg(1, 2), &prompt, &answer, &vocab, 64, None).unwrap();
        let targets = seq.targets();
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert_eq!(count, answer.len() + 1);
        // the position before the first answer token predicts it
        assert_eq!(targets[layout.answer_at - 1], Some(89));
        // the last answer token predicts [END]
        assert_eq!(targets[layout.end_at - 1], Some(vocab.end() as usize));
        // nothing before the answer region carries loss
        for t in targets.iter().take(layout.answer_at - 1) {
            assert!(t.is_none());
        }
    }

    #[test]
    fn hybrid_mask_structure() {
        let vocab = MergedVocab::byte_level(8).unwrap();
        let (seq, layout) =
            assemble_sequence(&eeg(2, 2), &[65, 66], &[67], &vocab, 64, Some(12)).unwrap();
        let m = &seq.mask;
        // stair inside EEG: position 0 (t=0) cannot see position 2 (t=1)
        assert!(!m.allowed(0, 2));
        assert!(m.allowed(2, 0));
        assert!(m.allowed(0, 1));
        // EEG never attends text
        assert!(!m.allowed(0, layout.sep_at));
        // text attends all EEG and is causal over text
        assert!(m.allowed(layout.sep_at, 0));
        assert!(m.allowed(layout.end_at, layout.answer_at));
        assert!(!m.allowed(layout.sep_at, layout.sep_at + 1));
        // PAD fully isolated
        for p in layout.end_at + 1..12 {
            for i in 0..12 {
                assert!(!m.allowed(p, i));
                assert!(!m.allowed(i, p));
            }
        }
    }

    #[test]
    fn overflow_and_empty_answer_rejected() {
        let vocab = MergedVocab::byte_level(8).unwrap();
        assert!(assemble_sequence(&eeg(2, 3), &[0; 10], &[1], &vocab, 10, None).is_err());
        assert!(assemble_sequence(&eeg(2, 3), &[0; 10], &[], &vocab, 64, None).is_err());
    }
}
