//! Tokenizer training loop: quantized temporal-frequency reconstruction
//! with scheduled adversarial alignment, plus the post-hoc probe used to
//! measure how separable EEG and text embeddings remain.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamSet;
use crate::optim::{AdamW, CosineSchedule};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError};

use super::adversarial::{adversarial_loss, lambda_schedule, sample_text_rows};
use super::model::{PreparedSample, Tokenizer};

#[derive(Debug, Clone)]
pub struct TokenizerTrainOptions {
    pub steps: u64,
    pub eeg_batch: usize,
    pub text_batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub adam_beta2: f64,
    pub align: bool,
    /// Re-initialize codes unused for this many consecutive steps onto a
    /// random encoder vector from the current batch; 0 disables.
    pub dead_code_steps: u64,
    pub seed: u64,
}

impl Default for TokenizerTrainOptions {
    fn default() -> Self {
        TokenizerTrainOptions {
            steps: 500,
            eeg_batch: 16,
            text_batch: 4,
            peak_lr: 1e-3,
            min_lr: 2e-4,
            warmup_frac: 0.1,
            weight_decay: 1e-4,
            adam_beta2: 0.999,
            align: true,
            dead_code_steps: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerStepReport {
    pub step: u64,
    pub total: f64,
    pub temporal: f64,
    pub frequency: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub adversarial: Option<f64>,
    pub lambda: f64,
    pub lr: f64,
    /// Fraction of the codebook used by this batch.
    pub utilization: f64,
}

pub struct TokenizerTrainer {
    pub tokenizer: Tokenizer<f32>,
    /// Text embedding rows the adversarial batches draw from (the base
    /// LM's text-token embedding table).
    pub text_table: Tensor<f32>,
    pub opts: TokenizerTrainOptions,
    pub opt: AdamW<f32>,
    pub sched: CosineSchedule,
    pub step: u64,
    pub rng: ChaCha8Rng,
    last_used: Vec<u64>,
}

impl TokenizerTrainer {
    pub fn new(
        tokenizer: Tokenizer<f32>,
        text_table: Tensor<f32>,
        opts: TokenizerTrainOptions,
    ) -> Result<Self> {
        if opts.align {
            let d = tokenizer.cfg.encoder.hidden;
            if text_table.shape().len() != 2 || text_table.shape()[1] != d {
                return Err(TensorError::InvalidArg {
                    op: "tokenizer_trainer",
                    detail: format!(
                        "alignment requires text embedding width {} to equal the encoder width {d}",
                        text_table.shape().last().copied().unwrap_or(0),
                    ),
                });
            }
        }
        let sched = CosineSchedule {
            peak: opts.peak_lr,
            min: opts.min_lr,
            warmup_steps: (opts.steps as f64 * opts.warmup_frac).round() as u64,
            total_steps: opts.steps,
        };
        let opt = AdamW::new(0.9, opts.adam_beta2, opts.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let last_used = vec![0; tokenizer.cfg.codebook_size];
        Ok(TokenizerTrainer { tokenizer, text_table, opts, opt, sched, step: 0, rng, last_used })
    }

    /// One optimizer update over an EEG micro-batch. The adversarial term
    /// trains the classifier at full strength while the encoder receives
    /// the reversed gradient scaled by the schedule's lambda.
    pub fn train_step(&mut self, batch: &[PreparedSample]) -> Result<TokenizerStepReport> {
        if batch.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "train_tokenizer_step",
                detail: "empty batch".into(),
            });
        }
        let lambda = if self.opts.align {
            lambda_schedule(self.step, self.opts.steps.max(1))?
        } else {
            0.0
        };

        let mut tape = Tape::new();
        let bound = self.tokenizer.params.bind(&mut tape, true)?;

        let mut totals = Vec::with_capacity(batch.len());
        let mut report = (0.0, 0.0, 0.0, 0.0); // temporal, frequency, codebook, commitment
        let mut eeg_parts = Vec::with_capacity(batch.len());
        let mut code_rows: Vec<Tensor<f32>> = Vec::with_capacity(batch.len());
        let mut used_codes = std::collections::BTreeSet::new();
        for sample in batch {
            let loss = self.tokenizer.loss_on(&mut tape, &bound, sample)?;
            report.0 += tape.value(loss.temporal).scalar_value()?.to_f64_exact();
            report.1 += tape.value(loss.frequency).scalar_value()?.to_f64_exact();
            report.2 += tape.value(loss.codebook).scalar_value()?.to_f64_exact();
            report.3 += tape.value(loss.commitment).scalar_value()?.to_f64_exact();
            used_codes.extend(loss.tokens.indices.iter().copied());
            code_rows.push(tape.value(loss.normalized_codes).clone());
            totals.push(loss.total);
            eeg_parts.push(loss.embeddings);
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut recon = totals[0];
        for &t in &totals[1..] {
            recon = tape.add(recon, t)?;
        }
        recon = tape.scale(recon, inv_b)?;

        let mut adversarial = None;
        let mut total = recon;
        if self.opts.align {
            let eeg = tape.concat(&eeg_parts, 0)?;
            let text =
                sample_text_rows(&self.text_table, self.opts.text_batch, &mut self.rng)?;
            let text = tape.constant(text)?;
            let adv = adversarial_loss(&mut tape, &bound, eeg, text, lambda)?;
            adversarial = Some(tape.value(adv).scalar_value()?.to_f64_exact());
            total = tape.add(total, adv)?;
        }

        let total_value = tape.value(total).scalar_value()?.to_f64_exact();
        if !total_value.is_finite() {
            return Err(TensorError::NonFinite { op: "train_tokenizer_step" });
        }
        tape.backward(total)?;
        let grads = self.tokenizer.params.collect_grads(&tape, &bound);
        let lr = self.sched.lr(self.step);
        self.opt.step(&mut self.tokenizer.params, &grads, lr);
        self.step += 1;

        for &code in &used_codes {
            self.last_used[code as usize] = self.step;
        }
        if self.opts.dead_code_steps > 0 {
            self.revive_dead_codes(&code_rows)?;
        }

        Ok(TokenizerStepReport {
            step: self.step,
            total: total_value,
            temporal: report.0 * inv_b,
            frequency: report.1 * inv_b,
            codebook: report.2 * inv_b,
            commitment: report.3 * inv_b,
            adversarial,
            lambda,
            lr,
            utilization: used_codes.len() as f64 / self.tokenizer.cfg.codebook_size as f64,
        })
    }

    /// Snap long-unused codebook rows onto random encoder vectors from the
    /// current batch (plus small noise) so the codebook cannot collapse to
    /// a handful of live codes.
    fn revive_dead_codes(&mut self, code_rows: &[Tensor<f32>]) -> Result<()> {
        use rand_distr::Distribution;
        let total_rows: usize = code_rows.iter().map(|t| t.shape()[0]).sum();
        if total_rows == 0 {
            return Ok(());
        }
        let d = self.tokenizer.cfg.code_dim;
        let noise = rand_distr::Normal::new(0.0f64, 0.05).unwrap();
        let threshold = self.opts.dead_code_steps;
        for code in 0..self.tokenizer.cfg.codebook_size {
            if self.step.saturating_sub(self.last_used[code]) < threshold {
                continue;
            }
            let mut pick = self.rng.gen_range(0..total_rows);
            let mut src_row: &[f32] = &[];
            for t in code_rows {
                let rows = t.shape()[0];
                if pick < rows {
                    src_row = t.row(pick);
                    break;
                }
                pick -= rows;
            }
            let codebook = self.tokenizer.params.get_mut("codebook");
            let dst = &mut codebook.data_mut()[code * d..(code + 1) * d];
            for (j, v) in dst.iter_mut().enumerate() {
                *v = src_row[j] + noise.sample(&mut self.rng) as f32;
            }
            self.last_used[code] = self.step;
        }
        Ok(())
    }

    /// Draw one batch (with replacement) and take a step.
    pub fn train_step_sampled(
        &mut self,
        dataset: &[PreparedSample],
    ) -> Result<TokenizerStepReport> {
        let b = self.opts.eeg_batch.min(dataset.len()).max(1);
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.gen_range(0..dataset.len());
            batch.push(dataset[i].clone());
        }
        self.train_step(&batch)
    }

    /// Run the configured number of steps over a dataset.
    pub fn run(
        &mut self,
        dataset: &[PreparedSample],
        mut on_step: impl FnMut(&TokenizerStepReport),
    ) -> Result<TokenizerStepReport> {
        if dataset.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "train_tokenizer",
                detail: "empty dataset".into(),
            });
        }
        let mut last = None;
        for _ in self.step..self.opts.steps {
            let report = self.train_step_sampled(dataset)?;
            on_step(&report);
            last = Some(report);
        }
        last.ok_or(TensorError::InvalidArg {
            op: "train_tokenizer",
            detail: "zero steps configured".into(),
        })
    }

    /// Mean per-element squared error of the temporal reconstruction over a
    /// dataset, plus the mean signal variance it is measured against.
    pub fn reconstruction_mse(&self, dataset: &[PreparedSample]) -> Result<(f64, f64)> {
        let mut mse_sum = 0.0;
        let mut var_sum = 0.0;
        for sample in dataset {
            let mut tape = Tape::new();
            let bound = self.tokenizer.params.bind(&mut tape, false)?;
            let loss = self.tokenizer.loss_on(&mut tape, &bound, sample)?;
            mse_sum += tape.value(loss.temporal).scalar_value()?.to_f64_exact();
            let x = &sample.grid.patches;
            let n = x.len() as f64;
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
            var_sum += x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        }
        let n = dataset.len() as f64;
        Ok((mse_sum / n, var_sum / n))
    }
}

/// Train a fresh 2-layer probe to separate held-out EEG embeddings from
/// text embeddings and report its held-out accuracy. Used to compare how
/// discriminable the two spaces remain with and without alignment.
pub fn probe_discrimination_accuracy(
    eeg_rows: &Tensor<f32>,
    text_rows: &Tensor<f32>,
    seed: u64,
    steps: u64,
) -> Result<f64> {
    let d = eeg_rows.shape()[1];
    if text_rows.shape()[1] != d {
        return Err(TensorError::ShapeMismatch {
            op: "probe",
            detail: format!("{:?} vs {:?}", eeg_rows.shape(), text_rows.shape()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::<f32>::new();
    let std1 = (1.0 / d as f64).sqrt();
    crate::nn::init_linear(&mut ps, "adv.fc1", d, 2 * d, std1, &mut rng);
    let std2 = (1.0 / (2 * d) as f64).sqrt();
    crate::nn::init_linear(&mut ps, "adv.fc2", 2 * d, 1, std2, &mut rng);

    // deterministic 70/30 split of each domain
    let split = |rows: &Tensor<f32>| {
        let n = rows.shape()[0];
        let cut = (n * 7) / 10;
        (rows_slice(rows, 0, cut), rows_slice(rows, cut, n - cut))
    };
    let (eeg_tr, eeg_te) = split(eeg_rows);
    let (text_tr, text_te) = split(text_rows);

    let mut opt = AdamW::new(0.9, 0.999, 0.0);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, true)?;
        let e = tape.constant(eeg_tr.clone())?;
        let t = tape.constant(text_tr.clone())?;
        let x = tape.concat(&[e, t], 0)?;
        let logits = super::adversarial::classifier_logits(&mut tape, &bound, x)?;
        let mut labels = vec![1.0; eeg_tr.shape()[0]];
        labels.extend(std::iter::repeat(0.0).take(text_tr.shape()[0]));
        let loss = tape.bce_with_logits(logits, &labels)?;
        tape.backward(loss)?;
        let grads = ps.collect_grads(&tape, &bound);
        opt.step(&mut ps, &grads, 1e-2);
    }

    // held-out accuracy
    let mut tape = Tape::new();
    let bound = ps.bind(&mut tape, false)?;
    let e = tape.constant(eeg_te.clone())?;
    let t = tape.constant(text_te.clone())?;
    let x = tape.concat(&[e, t], 0)?;
    let logits = super::adversarial::classifier_logits(&mut tape, &bound, x)?;
    let vals = tape.value(logits).data();
    let n_eeg = eeg_te.shape()[0];
    let mut correct = 0usize;
    for (i, &z) in vals.iter().enumerate() {
        let predicted_eeg = z > 0.0;
        if predicted_eeg == (i < n_eeg) {
            correct += 1;
        }
    }
    Ok(correct as f64 / vals.len() as f64)
}

fn rows_slice(t: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let d = t.shape()[1];
    let data = t.data()[start * d..(start + len) * d].to_vec();
    Tensor::new(vec![len, d], data).expect("slice shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::StackConfig;
    use crate::signal::{patchify, EEGSample};
    use crate::tokenizer::model::{Reconstruct, TokenizerConfig};

    fn tiny_cfg() -> TokenizerConfig {
        TokenizerConfig {
            patch_len: 40,
            encoder: StackConfig { layers: 1, hidden: 16, heads: 2, mlp: 32 },
            decoder: StackConfig { layers: 1, hidden: 16, heads: 2, mlp: 32 },
            codebook_size: 16,
            code_dim: 8,
            max_patches: 16,
            beta: 1.0,
            reconstruct: Reconstruct::Both,
        }
    }

    fn tiny_dataset(cfg: &TokenizerConfig, n: usize) -> Vec<PreparedSample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| {
                let window: Vec<f32> = (0..2 * 2 * cfg.patch_len)
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect();
                let s = EEGSample {
                    channel_ids: vec!["CZ".into(), "PZ".into()],
                    window,
                    offset: 0,
                };
                PreparedSample::new(patchify(&s, cfg.patch_len).unwrap(), &s.channel_ids).unwrap()
            })
            .collect()
    }

    fn trainer(align: bool, steps: u64) -> (TokenizerTrainer, Vec<PreparedSample>) {
        let cfg = tiny_cfg();
        let tok = Tokenizer::<f32>::init(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = Tensor::<f32>::randn(&[64, 16], 0.02, &mut rng);
        let opts = TokenizerTrainOptions {
            steps,
            eeg_batch: 4,
            text_batch: 4,
            align,
            ..Default::default()
        };
        let data = tiny_dataset(&cfg, 8);
        (TokenizerTrainer::new(tok, text, opts).unwrap(), data)
    }

    #[test]
    fn loss_decreases_and_codebook_stays_alive() {
        let (mut tr, data) = trainer(true, 60);
        let first = tr.train_step_sampled(&data).unwrap();
        let mut last = first.clone();
        for _ in 1..60 {
            last = tr.train_step_sampled(&data).unwrap();
        }
        assert!(last.total < first.total, "{} -> {}", first.total, last.total);
        // collapse detector: more than one code in use
        assert!(last.utilization > 1.0 / 16.0);
        assert!(last.lambda > 0.0);
    }

    #[test]
    fn deterministic_training_trajectory() {
        let run = || {
            let (mut tr, data) = trainer(true, 10);
            let mut losses = Vec::new();
            for _ in 0..10 {
                losses.push(tr.train_step_sampled(&data).unwrap().total);
            }
            losses
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must give a bit-identical loss trajectory");
    }

    #[test]
    fn dimension_contract_enforced() {
        let cfg = tiny_cfg();
        let tok = Tokenizer::<f32>::init(cfg, 5).unwrap();
        let text = Tensor::<f32>::zeros(&[64, 8]); // wrong width
        let opts = TokenizerTrainOptions { align: true, ..Default::default() };
        assert!(TokenizerTrainer::new(tok, text, opts).is_err());
    }

    #[test]
    fn reconstruct_toggle_gates_head_gradients() {
        let cfg = TokenizerConfig { reconstruct: Reconstruct::Frequency, ..tiny_cfg() };
        let tok = Tokenizer::<f32>::init(cfg.clone(), 5).unwrap();
        let data = tiny_dataset(&cfg, 2);
        let mut tape = Tape::new();
        let bound = tok.params.bind(&mut tape, true).unwrap();
        let loss = tok.loss_on(&mut tape, &bound, &data[0]).unwrap();
        tape.backward(loss.total).unwrap();
        let ht = tape.grad(bound.var("head_t.w"));
        let hf = tape.grad(bound.var("head_f.w"));
        assert!(ht.map_or(true, |g| g.data().iter().all(|&v| v == 0.0)),
            "temporal head must not receive reconstruction gradient");
        assert!(hf.map_or(false, |g| g.data().iter().any(|&v| v != 0.0)),
            "frequency head must receive reconstruction gradient");
    }

    #[test]
    fn probe_separates_distinct_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut eeg = Tensor::<f32>::randn(&[40, 8], 0.1, &mut rng);
        for v in eeg.data_mut() {
            *v += 2.0; // clearly shifted cloud
        }
        let text = Tensor::<f32>::randn(&[40, 8], 0.1, &mut rng);
        let acc = probe_discrimination_accuracy(&eeg, &text, 3, 300).unwrap();
        assert!(acc > 0.95, "probe accuracy {acc}");
    }
}
