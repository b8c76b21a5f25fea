//! Multi-channel autoregressive pre-training: every EEG token predicts the
//! next-time token of its own channel under the stair-stepping mask, with
//! interleaved plain-text batches to preserve language modeling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::checkpoint::Checkpoint;
use crate::dataio::DataIoError;
use crate::lm::{
    text_sequence, AttnMask, LanguageModel, MergedVocab, PositionKind, SeqPosition, TokenSequence,
};
use crate::optim::{clip_global_norm, AdamW, CosineSchedule};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError};
use crate::tokenizer::TokenGrid;

/// One pre-training example: frozen-encoder embeddings already reordered
/// time-major (`row p = t * C + c`), the token grid they quantized to, and
/// the registry channel ids.
#[derive(Debug, Clone)]
pub struct McarSample {
    pub h: Tensor<f32>,
    pub grid: TokenGrid,
    pub channel_ids: Vec<u16>,
}

impl McarSample {
    /// Reorder channel-major encoder rows `(c, j)` into the time-major
    /// order the sequence uses.
    pub fn from_encoder_rows(
        h_channel_major: &Tensor<f32>,
        grid: TokenGrid,
        channel_ids: Vec<u16>,
    ) -> Result<Self> {
        let c = grid.n_channels;
        let n = grid.n_patches;
        let d = *h_channel_major.shape().last().unwrap_or(&0);
        if h_channel_major.shape() != [c * n, d] || channel_ids.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "mcar_sample",
                detail: format!(
                    "h {:?} vs grid {}x{} with {} channels",
                    h_channel_major.shape(),
                    c,
                    n,
                    channel_ids.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(c * n * d);
        for t in 0..n {
            for ch in 0..c {
                data.extend_from_slice(h_channel_major.row(ch * n + t));
            }
        }
        Ok(McarSample { h: Tensor::new(vec![c * n, d], data)?, grid, channel_ids })
    }
}

/// Next-time same-channel targets in time-major flat order: position
/// `(c, t)` is assigned the merged id of `z[c, t+1]`; the last time step
/// has no target. A single-time-step grid has no defined loss.
pub fn mcar_targets(grid: &TokenGrid, vocab: &MergedVocab) -> Result<Vec<Option<u32>>> {
    let c = grid.n_channels;
    let t = grid.n_patches;
    if t < 2 {
        return Err(TensorError::InvalidArg {
            op: "mcar_targets",
            detail: format!("{t} time step(s): every target would be empty"),
        });
    }
    let mut targets = Vec::with_capacity(c * t);
    for time in 0..t {
        for ch in 0..c {
            if time + 1 < t {
                targets.push(Some(vocab.eeg_id(grid.index(ch, time + 1))?));
            } else {
                targets.push(None);
            }
        }
    }
    Ok(targets)
}

/// Time-major EEG sequence with the stair mask and next-time targets.
pub fn mcar_sequence(sample: &McarSample, vocab: &MergedVocab, max_seq: usize) -> Result<TokenSequence> {
    let c = sample.grid.n_channels;
    let t = sample.grid.n_patches;
    let targets = mcar_targets(&sample.grid, vocab)?;
    let mut positions = Vec::with_capacity(c * t);
    for time in 0..t {
        for ch in 0..c {
            let p = time * c + ch;
            positions.push(SeqPosition {
                kind: PositionKind::Eeg {
                    row: p,
                    channel: sample.channel_ids[ch],
                    time: time as u32,
                },
                pos_index: time as u32,
                target: targets[p],
            });
        }
    }
    Ok(TokenSequence { positions, mask: AttnMask::stair_step(c, t, 0, max_seq)? })
}

/// Mean cross-entropy over positions that carry a target, over the full
/// merged vocabulary.
pub fn mcar_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: crate::tensor::Var,
    targets: &[Option<usize>],
) -> Result<crate::tensor::Var> {
    tape.cross_entropy_masked(logits, targets)
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub steps: u64,
    pub eeg_batch: usize,
    /// EEG:text example ratio (15 mirrors a 480:32 split).
    pub text_ratio: usize,
    /// Token length of each text training window.
    pub text_len: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub adam_beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 2000,
            eeg_batch: 8,
            text_ratio: 15,
            text_len: 64,
            peak_lr: 6e-4,
            min_lr: 6e-5,
            warmup_frac: 0.1,
            weight_decay: 0.1,
            adam_beta2: 0.95,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLogRecord {
    pub step: u64,
    pub mcar_loss: f64,
    pub text_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub val_perplexity: Option<f64>,
}

pub struct Pretrainer {
    pub model: LanguageModel<f32>,
    pub opts: PretrainOptions,
    pub opt: AdamW<f32>,
    pub sched: CosineSchedule,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<PretrainLogRecord>,
}

impl Pretrainer {
    pub fn new(model: LanguageModel<f32>, opts: PretrainOptions) -> Self {
        let sched = CosineSchedule {
            peak: opts.peak_lr,
            min: opts.min_lr,
            warmup_steps: (opts.steps as f64 * opts.warmup_frac).round() as u64,
            total_steps: opts.steps,
        };
        let opt = AdamW::new(0.9, opts.adam_beta2, opts.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(opts.seed);
        Pretrainer { model, opts, opt, sched, step: 0, rng, history: Vec::new() }
    }

    pub fn text_batch_size(&self) -> usize {
        (self.opts.eeg_batch + self.opts.text_ratio - 1) / self.opts.text_ratio.max(1)
    }

    /// One combined update: the multi-channel objective over the EEG
    /// micro-batch plus the ordinary next-token objective over the text
    /// micro-batch, summed 1:1. Encoder embeddings enter as constants, so
    /// no gradient can reach the frozen tokenizer.
    pub fn pretrain_step(
        &mut self,
        eeg_batch: &[&McarSample],
        text_batch: &[Vec<u32>],
    ) -> Result<PretrainLogRecord> {
        if eeg_batch.is_empty() || text_batch.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "pretrain_step",
                detail: "both EEG and text micro-batches must be non-empty".into(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true)?;

        let mut eeg_losses = Vec::with_capacity(eeg_batch.len());
        for sample in eeg_batch {
            let seq = mcar_sequence(sample, &self.model.vocab, self.model.cfg.max_seq)?;
            let h = tape.constant(sample.h.clone())?;
            let logits = self.model.forward_on(&mut tape, &bound, &seq, Some(h), None)?;
            eeg_losses.push(mcar_loss(&mut tape, logits, &seq.targets())?);
        }
        let mut eeg_total = eeg_losses[0];
        for &l in &eeg_losses[1..] {
            eeg_total = tape.add(eeg_total, l)?;
        }
        eeg_total = tape.scale(eeg_total, 1.0 / eeg_batch.len() as f64)?;

        let mut text_losses = Vec::with_capacity(text_batch.len());
        for ids in text_batch {
            let seq = text_sequence(ids, true)?;
            let logits = self.model.forward_on(&mut tape, &bound, &seq, None, None)?;
            text_losses.push(tape.cross_entropy_masked(logits, &seq.targets())?);
        }
        let mut text_total = text_losses[0];
        for &l in &text_losses[1..] {
            text_total = tape.add(text_total, l)?;
        }
        text_total = tape.scale(text_total, 1.0 / text_batch.len() as f64)?;

        let total = tape.add(eeg_total, text_total)?;
        let mcar_value = tape.value(eeg_total).scalar_value()? as f64;
        let text_value = tape.value(text_total).scalar_value()? as f64;
        if !tape.value(total).scalar_value()?.is_finite() {
            return Err(TensorError::NonFinite { op: "pretrain_step" });
        }
        tape.backward(total)?;
        let mut grads = self.model.params.collect_grads(&tape, &bound);
        let grad_norm = clip_global_norm(&mut grads, self.opts.grad_clip);
        let lr = self.sched.lr(self.step);
        self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;

        let record = PretrainLogRecord {
            step: self.step,
            mcar_loss: mcar_value,
            text_loss: text_value,
            lr,
            grad_norm,
            val_perplexity: None,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Draw micro-batches deterministically from the datasets and step.
    pub fn step_sampled(
        &mut self,
        eeg_data: &[McarSample],
        text_tokens: &[u32],
    ) -> Result<PretrainLogRecord> {
        if eeg_data.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "pretrain_step",
                detail: "empty EEG dataset".into(),
            });
        }
        let b = self.opts.eeg_batch.min(eeg_data.len()).max(1);
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            batch.push(&eeg_data[self.rng.gen_range(0..eeg_data.len())]);
        }
        let text_b = self.text_batch_size();
        let len = self.opts.text_len.min(text_tokens.len()).max(2);
        let mut texts = Vec::with_capacity(text_b);
        for _ in 0..text_b {
            let start = self.rng.gen_range(0..=text_tokens.len().saturating_sub(len));
            texts.push(text_tokens[start..start + len].to_vec());
        }
        self.pretrain_step(&batch, &texts)
    }

    /// exp(mean NLL) over every EEG target position of a held-out set.
    pub fn validation_perplexity(&self, held_out: &[McarSample]) -> Result<f64> {
        if held_out.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "validation_perplexity",
                detail: "empty held-out set".into(),
            });
        }
        let mut nll_sum = 0.0f64;
        let mut count = 0usize;
        for sample in held_out {
            let seq = mcar_sequence(sample, &self.model.vocab, self.model.cfg.max_seq)?;
            let targets = seq.targets();
            let n = targets.iter().filter(|t| t.is_some()).count();
            let logits = self.model.logits(&seq, Some(&sample.h))?;
            let mut tape = Tape::<f32>::new();
            let lv = tape.constant(logits)?;
            let ce = tape.cross_entropy_masked(lv, &targets)?;
            nll_sum += tape.value(ce).scalar_value()? as f64 * n as f64;
            count += n;
        }
        Ok((nll_sum / count as f64).exp())
    }

    /// Fraction of EEG target positions whose argmax logit is the target.
    pub fn next_token_accuracy(&self, data: &[McarSample]) -> Result<f64> {
        let mut correct = 0usize;
        let mut count = 0usize;
        for sample in data {
            let seq = mcar_sequence(sample, &self.model.vocab, self.model.cfg.max_seq)?;
            let logits = self.model.logits(&seq, Some(&sample.h))?;
            let v = self.model.vocab.total();
            for (p, t) in seq.targets().iter().enumerate() {
                let Some(t) = t else { continue };
                let row = &logits.data()[p * v..(p + 1) * v];
                let mut best = (0usize, f32::MIN);
                for (j, &x) in row.iter().enumerate() {
                    if x > best.1 {
                        best = (j, x);
                    }
                }
                if best.0 == *t {
                    correct += 1;
                }
                count += 1;
            }
        }
        Ok(correct as f64 / count.max(1) as f64)
    }

    /// Text-only validation loss (mean next-token cross-entropy).
    pub fn text_loss(&self, texts: &[Vec<u32>]) -> Result<f64> {
        let mut sum = 0.0;
        for ids in texts {
            let seq = text_sequence(ids, true)?;
            let logits = self.model.logits(&seq, None)?;
            let mut tape = Tape::<f32>::new();
            let lv = tape.constant(logits)?;
            let ce = tape.cross_entropy_masked(lv, &seq.targets())?;
            sum += tape.value(ce).scalar_value()? as f64;
        }
        Ok(sum / texts.len().max(1) as f64)
    }

    // ── persistence ─────────────────────────────────────────────────────

    pub fn to_checkpoint(&self, config_echo: String) -> Checkpoint {
        let mut ck = Checkpoint::new(
            self.step,
            self.rng.get_seed(),
            self.rng.get_word_pos(),
            config_echo,
        );
        ck.add_params("lm", &self.model.params);
        let (m, v) = self.opt.moments();
        ck.add_tensor_map("opt.m", m);
        ck.add_tensor_map("opt.v", v);
        let losses: Vec<f64> = self.history.iter().map(|r| r.mcar_loss).collect();
        ck.add_f64("history", "mcar_loss", &losses);
        ck
    }

    /// Restore parameters, optimizer moments, step counter, and RNG state
    /// from a checkpoint produced by `to_checkpoint`.
    pub fn restore(&mut self, ck: &Checkpoint) -> std::result::Result<(), DataIoError> {
        let params = ck.load_params("lm", &self.model.params)?;
        self.model.params = params;
        let m = ck.tensor_map("opt.m")?;
        let v = ck.tensor_map("opt.v")?;
        self.opt.restore(ck.step, m, v);
        self.step = ck.step;
        self.rng = ChaCha8Rng::from_seed(ck.rng_seed);
        self.rng.set_word_pos(ck.rng_word_pos);
        let losses = ck.f64_section("history", "mcar_loss").unwrap_or_default();
        self.history = losses
            .into_iter()
            .enumerate()
            .map(|(i, l)| PretrainLogRecord {
                step: i as u64 + 1,
                mcar_loss: l,
                text_loss: 0.0,
                lr: 0.0,
                grad_norm: 0.0,
                val_perplexity: None,
            })
            .collect();
        Ok(())
    }
}
