//! Operator surface for the EEG language-model pipeline. One command per
//! stage; every run is fully determined by its config file and seed and
//! writes its resolved configuration next to its outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use eeglm_core::config::RunConfig;
use eeglm_core::dataio::{
    read_recording, write_attention_dump, write_token_grid, AttentionDump, TokenGridFile,
};
use eeglm_core::instruct::{
    self, evaluate_items, render_instruction, template, InstructDataset, InstructItem,
};
use eeglm_core::lm::{LanguageModel, MergedVocab, TextCodec};
use eeglm_core::mcar::Pretrainer;
use eeglm_core::pipeline;
use eeglm_core::signal;
use eeglm_core::tokenizer::{PreparedSample, Tokenizer, TokenizerTrainer};

#[derive(Parser)]
#[command(name = "eeglm", version, about = "EEG tokenizer + language model pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (recordings + split manifests).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, notch, resample to 200 Hz, and scale a dataset directory.
    Preprocess {
        /// Dataset directory produced by `synth` (or laid out the same way).
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the neural tokenizer on a preprocessed dataset.
    TrainTokenizer {
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Reconstruction ablation: temporal|frequency|both.
        #[arg(long)]
        reconstruct: Option<String>,
    },
    /// Multi-channel autoregressive pre-training of the language model.
    Pretrain {
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-task instruction tuning.
    Instruct {
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override the option-shuffling toggle.
        #[arg(long)]
        shuffle_options: Option<bool>,
        /// Fraction of each task's training data to use.
        #[arg(long)]
        data_fraction: Option<f64>,
    },
    /// Evaluate a model on the test split and write per-task metrics.
    Eval {
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Export attention maps of the answer positions for the first
        /// test example.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Tokenize a preprocessed recording into codebook-index grids.
    Tokenize {
        recording: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {p:?}"))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output dir {out:?}"))?;
    Ok(())
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::write(out.join("resolved.cfg"), cfg.resolved_text())?;
    Ok(())
}

fn jsonl_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            ensure_out(&out)?;
            pipeline::synth_to_dir(&cfg, &out)?;
            println!("synth: dataset written to {}", out.display());
            Ok(())
        }
        Cmd::Preprocess { input, config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            ensure_out(&out)?;
            pipeline::preprocess_dir(&cfg, &input, &out)?;
            println!("preprocess: 200 Hz dataset written to {}", out.display());
            Ok(())
        }
        Cmd::TrainTokenizer { data, config, seed, out, reconstruct } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(r) = reconstruct {
                cfg.tok_reconstruct = r;
                cfg.validate()?;
            }
            ensure_out(&out)?;
            let windows = pipeline::load_windows(&cfg, &data, "train")?;
            if windows.is_empty() {
                bail!("no training windows in {}", data.display());
            }
            let samples: Vec<PreparedSample> =
                windows.into_iter().map(|w| w.sample).collect();
            let steps = RunConfig::stage_steps(
                cfg.tok_steps,
                cfg.tok_epochs,
                samples.len(),
                cfg.tok_eeg_batch,
            );

            let tokenizer = Tokenizer::<f32>::init(cfg.tokenizer_config(), cfg.seed)?;
            let vocab = MergedVocab::byte_level(cfg.tok_codebook)?;
            let lm = LanguageModel::<f32>::init(cfg.lm_config(), vocab, cfg.tok_hidden, cfg.seed)?;
            let text_table = lm.text_embedding_table();
            let mut trainer =
                TokenizerTrainer::new(tokenizer, text_table, cfg.tokenizer_train_options(steps))?;

            let mut log = jsonl_writer(&out.join("tokenizer_log.jsonl"))?;
            let print_every = (steps / 10).max(1);
            trainer.run(&samples, |r| {
                let line = serde_json::json!({
                    "step": r.step, "total": r.total, "temporal": r.temporal,
                    "frequency": r.frequency, "codebook": r.codebook,
                    "commitment": r.commitment, "adversarial": r.adversarial,
                    "lambda": r.lambda, "lr": r.lr, "utilization": r.utilization,
                });
                writeln!(log, "{line}").expect("log write");
                if r.step % print_every == 0 {
                    println!(
                        "tokenizer step {}/{steps}: loss {:.4} (t {:.4} f {:.4}) util {:.2}",
                        r.step, r.total, r.temporal, r.frequency, r.utilization
                    );
                }
            })?;
            log.flush()?;
            pipeline::save_tokenizer(
                &out.join("tokenizer.ckpt"),
                &trainer.tokenizer,
                trainer.step,
                cfg.resolved_text(),
            )?;
            write_resolved(&cfg, &out)?;
            println!("train-tokenizer: checkpoint at {}", out.join("tokenizer.ckpt").display());
            Ok(())
        }
        Cmd::Pretrain { data, tokenizer, config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            ensure_out(&out)?;
            let tok = pipeline::load_tokenizer(&tokenizer, &cfg)?;
            let train = pipeline::load_windows(&cfg, &data, "train")?;
            if train.is_empty() {
                bail!("no training windows in {}", data.display());
            }
            let train_items = pipeline::encode_windows(&tok, &train)?;
            let eeg_data: Vec<_> = train_items.into_iter().map(|i| i.eeg).collect();
            let val_path = data.join("val.manifest");
            let val_data = if val_path.is_file() {
                let val = pipeline::load_windows(&cfg, &data, "val")?;
                pipeline::encode_windows(&tok, &val)?
                    .into_iter()
                    .map(|i| i.eeg)
                    .collect()
            } else {
                Vec::new()
            };

            let steps = RunConfig::stage_steps(
                cfg.pre_steps,
                cfg.pre_epochs,
                eeg_data.len(),
                cfg.pre_eeg_batch,
            );
            let vocab = MergedVocab::byte_level(cfg.tok_codebook)?;
            let model = LanguageModel::<f32>::init(cfg.lm_config(), vocab, cfg.tok_hidden, cfg.seed)?;
            let mut trainer = Pretrainer::new(model, cfg.pretrain_options(steps));
            let text = pipeline::text_corpus(cfg.seed ^ 0x7e57, 400);

            let mut log = jsonl_writer(&out.join("pretrain_log.jsonl"))?;
            let eval_every = (steps / 20).max(1);
            for _ in 0..steps {
                let mut record = trainer.step_sampled(&eeg_data, &text)?;
                if !val_data.is_empty() && record.step % eval_every == 0 {
                    record.val_perplexity = Some(trainer.validation_perplexity(&val_data)?);
                    if let Some(last) = trainer.history.last_mut() {
                        last.val_perplexity = record.val_perplexity;
                    }
                }
                writeln!(log, "{}", serde_json::to_string(&record)?)?;
                if record.step % eval_every == 0 {
                    println!(
                        "pretrain step {}/{steps}: mcar {:.4} text {:.4}{}",
                        record.step,
                        record.mcar_loss,
                        record.text_loss,
                        record
                            .val_perplexity
                            .map(|p| format!(" val-ppl {p:.2}"))
                            .unwrap_or_default()
                    );
                }
            }
            log.flush()?;
            trainer.to_checkpoint(cfg.resolved_text()).write(&out.join("lm.ckpt"))?;
            write_resolved(&cfg, &out)?;
            println!("pretrain: checkpoint at {}", out.join("lm.ckpt").display());
            Ok(())
        }
        Cmd::Instruct {
            data,
            tokenizer,
            model,
            config,
            seed,
            out,
            shuffle_options,
            data_fraction,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = shuffle_options {
                cfg.ins_shuffle_options = s;
            }
            if let Some(f) = data_fraction {
                cfg.ins_data_fraction = f;
            }
            ensure_out(&out)?;
            let tok = pipeline::load_tokenizer(&tokenizer, &cfg)?;
            let lm = pipeline::load_lm(&model, &cfg)?;
            let train = pipeline::load_windows(&cfg, &data, "train")?;
            if train.is_empty() {
                bail!("no training windows in {}", data.display());
            }
            let items = pipeline::encode_windows(&tok, &train)?;
            let dataset = InstructDataset::new(
                items,
                cfg.ins_data_fraction,
                cfg.ins_task_cap_ratio,
                cfg.seed,
            )?;
            let steps = RunConfig::stage_steps(
                cfg.ins_steps,
                cfg.ins_epochs,
                dataset.n_items(),
                cfg.ins_batch,
            );
            let mut tuner =
                instruct::Tuner::new(lm, TextCodec::bytes(), cfg.tune_options(steps));
            let text = pipeline::text_corpus(cfg.seed ^ 0x7e57, 400);

            let mut log = jsonl_writer(&out.join("instruct_log.jsonl"))?;
            let print_every = (steps / 10).max(1);
            for _ in 0..steps {
                let record = tuner.step_sampled(&dataset, &text)?;
                writeln!(log, "{}", serde_json::to_string(&record)?)?;
                if record.step % print_every == 0 {
                    println!(
                        "instruct step {}/{steps}: answer {:.4} text {:.4}",
                        record.step, record.answer_loss, record.text_loss
                    );
                }
            }
            log.flush()?;
            pipeline::save_lm(&out.join("instruct.ckpt"), &tuner.model, tuner.step, cfg.resolved_text())?;
            write_resolved(&cfg, &out)?;
            println!("instruct: checkpoint at {}", out.join("instruct.ckpt").display());
            Ok(())
        }
        Cmd::Eval { data, tokenizer, model, config, seed, out, dump_attention } => {
            let cfg = load_config(&config, seed)?;
            ensure_out(&out)?;
            let tok = pipeline::load_tokenizer(&tokenizer, &cfg)?;
            let lm = pipeline::load_lm(&model, &cfg)?;
            let test = pipeline::load_windows(&cfg, &data, "test")?;
            if test.is_empty() {
                bail!("no test windows in {}", data.display());
            }
            let items = pipeline::encode_windows(&tok, &test)?;
            let codec = TextCodec::bytes();
            let by_task = evaluate_items(&lm, &codec, &items)?;
            let reports = pipeline::metrics_by_task(&by_task)?;
            let json = serde_json::to_string_pretty(&reports)?;
            std::fs::write(out.join("report.json"), &json)?;
            for (task, rep) in &reports {
                println!(
                    "eval {task}: n {} bal-acc {:.4} kappa {:.4} f1 {:.4}{}",
                    rep.n,
                    rep.balanced_accuracy,
                    rep.cohens_kappa,
                    rep.weighted_f1,
                    rep.auroc
                        .map(|a| format!(" auroc {a:.4} auc-pr {:.4}", rep.auc_pr.unwrap()))
                        .unwrap_or_default()
                );
            }
            if dump_attention {
                dump_first_example_attention(&lm, &codec, &items, &out)?;
                println!("eval: attention dump at {}", out.join("attention.nlat").display());
            }
            write_resolved(&cfg, &out)?;
            println!("eval: report at {}", out.join("report.json").display());
            Ok(())
        }
        Cmd::Tokenize { recording, tokenizer, config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            ensure_out(&out)?;
            let tok = pipeline::load_tokenizer(&tokenizer, &cfg)?;
            let rec = read_recording(&recording, cfg.line_freq())?;
            if (rec.sampling_rate - signal::TARGET_FS).abs() > 1e-9 {
                bail!(
                    "recording is at {} Hz; run `preprocess` first",
                    rec.sampling_rate
                );
            }
            let windows = signal::segment(&rec, cfg.window_seconds)?;
            let stem = recording
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "recording".into());
            for (i, w) in windows.iter().enumerate() {
                let grid = signal::patchify(w, signal::PATCH_LEN)?;
                let sample = PreparedSample::new(grid, &w.channel_ids)?;
                let (_h, tokens) = tok.encode_sample(&sample)?;
                let file = TokenGridFile {
                    n_channels: tokens.n_channels as u16,
                    n_patches: tokens.n_patches as u64,
                    codebook_size: tok.cfg.codebook_size as u32,
                    indices: tokens.indices.clone(),
                };
                write_token_grid(&out.join(format!("{stem}_w{i:04}.nltg")), &file)?;
            }
            println!("tokenize: {} window grid(s) written to {}", windows.len(), out.display());
            Ok(())
        }
    }
}

/// Capture per-layer attention for the first example's predicted answer
/// and export the rows of the answer positions.
fn dump_first_example_attention(
    lm: &LanguageModel<f32>,
    codec: &TextCodec,
    items: &[InstructItem],
    out: &Path,
) -> Result<()> {
    let item = &items[0];
    let t = template(&item.task).context("unknown task")?;
    let p = instruct::predict_answer(lm, &item.eeg, t, codec, None)?;
    let rendered = render_instruction(t, p.label, None)?;
    let prompt_ids = codec.encode(&rendered.prompt)?;
    let answer_ids = codec.encode(&rendered.answer)?;
    let (seq, layout) = instruct::assemble_sequence(
        &item.eeg,
        &prompt_ids,
        &answer_ids,
        &lm.vocab,
        lm.cfg.max_seq,
        None,
    )?;
    let (_logits, maps) = lm.logits_with_attention(&seq, Some(&item.eeg.h))?;
    let heads = lm.cfg.stack.heads;
    let layers = lm.cfg.stack.layers;
    let s = seq.len();
    let flagged: Vec<u32> = (layout.answer_at..=layout.end_at).map(|i| i as u32).collect();
    let mut rows = Vec::with_capacity(layers * heads * flagged.len() * s);
    for map in &maps {
        for &q in &flagged {
            rows.extend_from_slice(map.row(q as usize));
        }
    }
    let dump = AttentionDump {
        n_layers: layers as u16,
        n_heads: heads as u16,
        seq_len: s as u32,
        flagged,
        rows,
    };
    write_attention_dump(&out.join("attention.nlat"), &dump)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
