//! Greedy prediction constrained to a task's candidate answers. At each
//! position where the surviving candidates disagree, the next token is the
//! argmax over candidate-consistent tokens; class scores chain the
//! restricted softmax probabilities along the candidate prefix tree, so
//! for a two-candidate task the score is exactly the softmax over the two
//! first-divergent-token logits.

use crate::lm::{LanguageModel, TextCodec};
use crate::mcar::McarSample;
use crate::tensor::{Result, TensorError};

use super::assemble::{assemble_sequence, hybrid_prompt_sequence};
use super::templates::{render_instruction, InstructionTemplate};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Per-class scores summing to 1.
    pub scores: Vec<f64>,
}

/// Teacher-force each candidate answer and combine the conditional token
/// distributions into a greedy constrained prediction plus class scores.
pub fn predict_answer(
    model: &LanguageModel<f32>,
    eeg: &McarSample,
    template: &InstructionTemplate,
    codec: &TextCodec,
    permutation: Option<&[usize]>,
) -> Result<Prediction> {
    let n = template.n_classes();
    // any label renders the same prompt for a fixed permutation
    let rendered = render_instruction(template, 0, permutation)?;
    let prompt_ids = codec.encode(&rendered.prompt)?;

    // candidate token sequences, END appended => prefix-free
    let mut cands: Vec<Vec<u32>> = Vec::with_capacity(n);
    for class in 0..n {
        let r = render_instruction(template, class, permutation)?;
        let mut ids = codec.encode(&r.answer)?;
        ids.push(model.vocab.end());
        cands.push(ids);
    }
    for i in 0..n {
        for j in i + 1..n {
            if cands[i] == cands[j] {
                return Err(TensorError::InvalidArg {
                    op: "predict_answer",
                    detail: format!("classes {i} and {j} render identical answers"),
                });
            }
        }
    }

    // conditional logits for every candidate token, teacher-forced
    let vocab_total = model.vocab.total();
    let mut cond: Vec<Vec<Vec<f32>>> = Vec::with_capacity(n);
    for class in 0..n {
        let answer_only = &cands[class][..cands[class].len() - 1];
        let (seq, layout) = assemble_sequence(
            eeg,
            &prompt_ids,
            answer_only,
            &model.vocab,
            model.cfg.max_seq,
            None,
        )?;
        let logits = model.logits(&seq, Some(&eeg.h))?;
        let mut rows = Vec::with_capacity(cands[class].len());
        for j in 0..cands[class].len() {
            let pos = layout.answer_at - 1 + j;
            rows.push(logits.data()[pos * vocab_total..(pos + 1) * vocab_total].to_vec());
        }
        cond.push(rows);
    }

    // chained restricted softmax over the prefix tree
    let mut log_scores = vec![f64::NEG_INFINITY; n];
    let alive: Vec<usize> = (0..n).collect();
    walk_tree(&cands, &cond, &alive, 0, 0.0, &mut log_scores);

    let mut scores: Vec<f64> = log_scores.iter().map(|&l| l.exp()).collect();
    let sum: f64 = scores.iter().sum();
    for s in &mut scores {
        *s /= sum;
    }

    // greedy constrained descent
    let mut galive: Vec<usize> = (0..n).collect();
    let mut j = 0usize;
    while galive.len() > 1 {
        let groups = group_by_token(&cands, &galive, j);
        if groups.len() == 1 {
            j += 1;
            continue;
        }
        let probs = restricted_probs(&cond[galive[0]][j], &groups);
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        galive = groups[best].1.clone();
        j += 1;
    }

    Ok(Prediction { label: galive[0], scores })
}

fn group_by_token(cands: &[Vec<u32>], alive: &[usize], j: usize) -> Vec<(u32, Vec<usize>)> {
    let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
    for &c in alive {
        let tok = cands[c][j];
        match groups.iter_mut().find(|(t, _)| *t == tok) {
            Some((_, members)) => members.push(c),
            None => groups.push((tok, vec![c])),
        }
    }
    groups
}

fn restricted_probs(logits: &[f32], groups: &[(u32, Vec<usize>)]) -> Vec<f64> {
    let vals: Vec<f64> = groups.iter().map(|(t, _)| logits[*t as usize] as f64).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn walk_tree(
    cands: &[Vec<u32>],
    cond: &[Vec<Vec<f32>>],
    alive: &[usize],
    j: usize,
    acc: f64,
    out: &mut [f64],
) {
    if alive.len() == 1 {
        out[alive[0]] = acc;
        return;
    }
    let groups = group_by_token(cands, alive, j);
    if groups.len() == 1 {
        walk_tree(cands, cond, alive, j + 1, acc, out);
        return;
    }
    let probs = restricted_probs(&cond[alive[0]][j], &groups);
    for ((_, members), p) in groups.iter().zip(probs) {
        walk_tree(cands, cond, members, j + 1, acc + p.ln(), out);
    }
}

/// Unconstrained greedy decoding after the prompt; stops at [END] or after
/// `max_tokens`. Returns the decoded answer text (without [END]) or `None`
/// when the model never emits [END] or leaves the text-token range.
pub fn predict_answer_free(
    model: &LanguageModel<f32>,
    eeg: &McarSample,
    template: &InstructionTemplate,
    codec: &TextCodec,
    permutation: Option<&[usize]>,
    max_tokens: usize,
) -> Result<Option<String>> {
    let rendered = render_instruction(template, 0, permutation)?;
    let prompt_ids = codec.encode(&rendered.prompt)?;
    let mut text: Vec<u32> = Vec::with_capacity(prompt_ids.len() + 2 + max_tokens);
    text.push(model.vocab.sep());
    text.extend_from_slice(&prompt_ids);

    let vocab_total = model.vocab.total();
    let mut generated = Vec::new();
    for _ in 0..max_tokens {
        let seq = hybrid_prompt_sequence(eeg, &text, model.cfg.max_seq)?;
        let logits = model.logits(&seq, Some(&eeg.h))?;
        let last = seq.len() - 1;
        let row = &logits.data()[last * vocab_total..(last + 1) * vocab_total];
        let mut best = (0usize, f32::MIN);
        for (i, &v) in row.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        let tok = best.0 as u32;
        if tok == model.vocab.end() {
            return Ok(Some(codec.decode(&generated)));
        }
        if tok as usize >= codec.vocab_size() {
            return Ok(None); // left the plain-text range
        }
        generated.push(tok);
        text.push(tok);
    }
    Ok(None)
}
