//! Multi-task instruction tuning: mixed-task batches with answer-masked
//! loss, option shuffling, text-preservation batches, and evaluation into
//! per-task metric records.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lm::{text_sequence, LanguageModel, TextCodec};
use crate::mcar::McarSample;
use crate::metrics::EvalRecord;
use crate::optim::{clip_global_norm, AdamW, CosineSchedule};
use crate::tensor::{Result, Tape, TensorError, Var};

use super::assemble::assemble_sequence;
use super::predict::predict_answer;
use super::templates::{render_instruction, template, InstructionTemplate};

/// One labeled instruction-tuning example.
#[derive(Debug, Clone)]
pub struct InstructItem {
    pub eeg: McarSample,
    pub task: String,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub steps: u64,
    pub batch: usize,
    /// Instruction:text example ratio (4 mirrors a 512:128 split).
    pub text_ratio: usize,
    pub text_len: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub adam_beta2: f64,
    pub grad_clip: f64,
    pub shuffle_options: bool,
    /// Fraction of each task's training examples actually used.
    pub data_fraction: f64,
    /// A task contributes at most `cap_ratio x` the smallest task's weight.
    pub task_cap_ratio: f64,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            steps: 400,
            batch: 16,
            text_ratio: 4,
            text_len: 48,
            peak_lr: 5e-4,
            min_lr: 5e-5,
            warmup_frac: 0.1,
            weight_decay: 0.1,
            adam_beta2: 0.95,
            grad_clip: 1.0,
            shuffle_options: true,
            data_fraction: 1.0,
            task_cap_ratio: 8.0,
            seed: 0,
        }
    }
}

/// Task-grouped dataset with the seeded sampling weights.
pub struct InstructDataset {
    by_task: BTreeMap<String, Vec<InstructItem>>,
    weights: BTreeMap<String, f64>,
}

impl InstructDataset {
    /// Group items by task, keep `data_fraction` of each task (seeded
    /// shuffle, then prefix), and derive sampling weights proportional to
    /// size but capped at `cap_ratio` times the smallest task.
    pub fn new(items: Vec<InstructItem>, data_fraction: f64, cap_ratio: f64, seed: u64) -> Result<Self> {
        if items.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "instruct_dataset",
                detail: "no items".into(),
            });
        }
        if !(0.0..=1.0).contains(&data_fraction) || data_fraction == 0.0 {
            return Err(TensorError::InvalidArg {
                op: "instruct_dataset",
                detail: format!("data fraction {data_fraction} not in (0, 1]"),
            });
        }
        let mut by_task: BTreeMap<String, Vec<InstructItem>> = BTreeMap::new();
        for item in items {
            if template(&item.task).is_none() {
                return Err(TensorError::InvalidArg {
                    op: "instruct_dataset",
                    detail: format!("unknown task {:?}", item.task),
                });
            }
            by_task.entry(item.task.clone()).or_default().push(item);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        for items in by_task.values_mut() {
            items.shuffle(&mut rng);
            let keep = ((items.len() as f64 * data_fraction).ceil() as usize).max(1);
            items.truncate(keep);
        }
        let smallest = by_task.values().map(Vec::len).min().unwrap() as f64;
        let weights = by_task
            .iter()
            .map(|(task, items)| {
                (task.clone(), (items.len() as f64).min(cap_ratio * smallest))
            })
            .collect();
        Ok(InstructDataset { by_task, weights })
    }

    pub fn n_items(&self) -> usize {
        self.by_task.values().map(Vec::len).sum()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &String> {
        self.by_task.keys()
    }

    pub fn items(&self, task: &str) -> &[InstructItem] {
        &self.by_task[task]
    }

    pub fn all_items(&self) -> impl Iterator<Item = &InstructItem> {
        self.by_task.values().flatten()
    }

    fn sample<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a InstructItem {
        let total: f64 = self.weights.values().sum();
        let mut dart = rng.gen_range(0.0..total);
        for (task, w) in &self.weights {
            if dart < *w {
                let items = &self.by_task[task];
                return &items[rng.gen_range(0..items.len())];
            }
            dart -= w;
        }
        let items = self.by_task.values().next_back().unwrap();
        &items[rng.gen_range(0..items.len())]
    }
}

/// Mean cross-entropy over the answer span (the answer tokens plus [END]),
/// factorized left to right by the causal mask.
pub fn answer_loss<S: crate::tensor::Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &[Option<usize>],
) -> Result<Var> {
    tape.cross_entropy_masked(logits, targets)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneLogRecord {
    pub step: u64,
    pub answer_loss: f64,
    pub text_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Tuner {
    pub model: LanguageModel<f32>,
    pub codec: TextCodec,
    pub opts: TuneOptions,
    pub opt: AdamW<f32>,
    pub sched: CosineSchedule,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<TuneLogRecord>,
}

impl Tuner {
    pub fn new(model: LanguageModel<f32>, codec: TextCodec, opts: TuneOptions) -> Self {
        let sched = CosineSchedule {
            peak: opts.peak_lr,
            min: opts.min_lr,
            warmup_steps: (opts.steps as f64 * opts.warmup_frac).round() as u64,
            total_steps: opts.steps,
        };
        let opt = AdamW::new(0.9, opts.adam_beta2, opts.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(opts.seed);
        Tuner { model, codec, opts, opt, sched, step: 0, rng, history: Vec::new() }
    }

    fn render_for_training(
        &mut self,
        t: &InstructionTemplate,
        label: usize,
    ) -> Result<(Vec<u32>, Vec<u32>)> {
        let perm: Option<Vec<usize>> = if self.opts.shuffle_options && t.is_multiple_choice() {
            let mut p: Vec<usize> = (0..t.n_classes()).collect();
            p.shuffle(&mut self.rng);
            Some(p)
        } else {
            None
        };
        let r = render_instruction(t, label, perm.as_deref())?;
        Ok((self.codec.encode(&r.prompt)?, self.codec.encode(&r.answer)?))
    }

    /// One update over a mixed instruction batch plus a text batch.
    pub fn tune_step(
        &mut self,
        items: &[&InstructItem],
        texts: &[Vec<u32>],
    ) -> Result<TuneLogRecord> {
        if items.is_empty() || texts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "tune_step",
                detail: "both instruction and text micro-batches must be non-empty".into(),
            });
        }
        // render outside the tape loop: rendering draws from the rng
        let mut rendered = Vec::with_capacity(items.len());
        for item in items {
            let t = template(&item.task).ok_or_else(|| TensorError::InvalidArg {
                op: "tune_step",
                detail: format!("unknown task {:?}", item.task),
            })?;
            rendered.push(self.render_for_training(t, item.label)?);
        }

        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true)?;
        let mut ans_losses = Vec::with_capacity(items.len());
        for (item, (prompt, answer)) in items.iter().zip(&rendered) {
            let (seq, _layout) = assemble_sequence(
                &item.eeg,
                prompt,
                answer,
                &self.model.vocab,
                self.model.cfg.max_seq,
                None,
            )?;
            let h = tape.constant(item.eeg.h.clone())?;
            let logits = self.model.forward_on(&mut tape, &bound, &seq, Some(h), None)?;
            ans_losses.push(answer_loss(&mut tape, logits, &seq.targets())?);
        }
        let mut ans_total = ans_losses[0];
        for &l in &ans_losses[1..] {
            ans_total = tape.add(ans_total, l)?;
        }
        ans_total = tape.scale(ans_total, 1.0 / items.len() as f64)?;

        let mut text_losses = Vec::with_capacity(texts.len());
        for ids in texts {
            let seq = text_sequence(ids, true)?;
            let logits = self.model.forward_on(&mut tape, &bound, &seq, None, None)?;
            text_losses.push(tape.cross_entropy_masked(logits, &seq.targets())?);
        }
        let mut text_total = text_losses[0];
        for &l in &text_losses[1..] {
            text_total = tape.add(text_total, l)?;
        }
        text_total = tape.scale(text_total, 1.0 / texts.len() as f64)?;

        let total = tape.add(ans_total, text_total)?;
        let ans_value = tape.value(ans_total).scalar_value()? as f64;
        let text_value = tape.value(text_total).scalar_value()? as f64;
        tape.backward(total)?;
        let mut grads = self.model.params.collect_grads(&tape, &bound);
        let grad_norm = clip_global_norm(&mut grads, self.opts.grad_clip);
        let lr = self.sched.lr(self.step);
        self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;

        let record = TuneLogRecord {
            step: self.step,
            answer_loss: ans_value,
            text_loss: text_value,
            lr,
            grad_norm,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn step_sampled(
        &mut self,
        dataset: &InstructDataset,
        text_tokens: &[u32],
    ) -> Result<TuneLogRecord> {
        let b = self.opts.batch.min(dataset.n_items()).max(1);
        let mut items: Vec<&InstructItem> = Vec::with_capacity(b);
        for _ in 0..b {
            items.push(dataset.sample(&mut self.rng));
        }
        let text_b = (b + self.opts.text_ratio - 1) / self.opts.text_ratio.max(1);
        let len = self.opts.text_len.min(text_tokens.len()).max(2);
        let mut texts = Vec::with_capacity(text_b);
        for _ in 0..text_b {
            let start = self.rng.gen_range(0..=text_tokens.len().saturating_sub(len));
            texts.push(text_tokens[start..start + len].to_vec());
        }
        self.tune_step(&items, &texts)
    }

    /// Constrained predictions over a held-out set, grouped by task.
    pub fn evaluate(&self, items: &[InstructItem]) -> Result<BTreeMap<String, Vec<EvalRecord>>> {
        evaluate_items(&self.model, &self.codec, items)
    }
}

/// Constrained predictions over a held-out set, grouped by task.
pub fn evaluate_items(
    model: &LanguageModel<f32>,
    codec: &TextCodec,
    items: &[InstructItem],
) -> Result<BTreeMap<String, Vec<EvalRecord>>> {
    let mut out: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for item in items {
        let t = template(&item.task).ok_or_else(|| TensorError::InvalidArg {
            op: "evaluate",
            detail: format!("unknown task {:?}", item.task),
        })?;
        let p = predict_answer(model, &item.eeg, t, codec, None)?;
        out.entry(item.task.clone()).or_default().push(EvalRecord {
            true_class: item.label,
            predicted: p.label,
            scores: p.scores,
        });
    }
    Ok(out)
}
