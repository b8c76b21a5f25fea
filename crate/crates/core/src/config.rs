//! Run configuration: a flat `key = value` text file covering the model
//! presets, batch sizes, learning-rate pairs, schedules, and study
//! toggles. Unknown keys are rejected, and every run writes its resolved
//! configuration next to its outputs in canonical form.

use std::path::Path;

use thiserror::Error;

use crate::dataio::synth::{ClassSignature, SynthTaskSpec};
use crate::lm::LMConfig;
use crate::mcar::PretrainOptions;
use crate::nn::StackConfig;
use crate::signal::LineFreq;
use crate::tokenizer::{Reconstruct, TokenizerConfig, TokenizerTrainOptions};
use crate::instruct::TuneOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {detail}")]
    BadLine { line: usize, detail: String },
    #[error("key {key:?}: {detail}")]
    BadValue { key: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // data
    pub line_freq: u32,
    pub window_seconds: f64,
    // synth
    pub synth_task: String,
    /// Per class: list of (hz, amplitude µV) bands.
    pub synth_signatures: Vec<Vec<(f64, f64)>>,
    pub synth_noise_uv: f64,
    pub synth_channels: Vec<String>,
    pub synth_fs: f64,
    pub synth_train_per_class: usize,
    pub synth_val_per_class: usize,
    pub synth_test_per_class: usize,
    // tokenizer
    pub tok_layers: usize,
    pub tok_hidden: usize,
    pub tok_heads: usize,
    pub tok_mlp: usize,
    pub tok_decoder_layers: usize,
    pub tok_codebook: usize,
    pub tok_code_dim: usize,
    pub tok_beta: f64,
    pub tok_reconstruct: String,
    pub tok_align: bool,
    pub tok_steps: u64,
    pub tok_epochs: f64,
    pub tok_eeg_batch: usize,
    pub tok_text_batch: usize,
    pub tok_peak_lr: f64,
    pub tok_min_lr: f64,
    pub tok_warmup_frac: f64,
    pub tok_weight_decay: f64,
    pub tok_adam_beta2: f64,
    pub tok_dead_code_steps: u64,
    // lm
    pub lm_preset: String,
    pub lm_layers: usize,
    pub lm_hidden: usize,
    pub lm_heads: usize,
    pub lm_mlp: usize,
    pub lm_max_seq: usize,
    pub lm_tied_head: bool,
    // pretrain
    pub pre_steps: u64,
    pub pre_epochs: f64,
    pub pre_eeg_batch: usize,
    pub pre_text_ratio: usize,
    pub pre_text_len: usize,
    pub pre_peak_lr: f64,
    pub pre_min_lr: f64,
    pub pre_warmup_frac: f64,
    pub pre_weight_decay: f64,
    pub pre_adam_beta2: f64,
    pub pre_grad_clip: f64,
    // instruct
    pub ins_steps: u64,
    pub ins_epochs: f64,
    pub ins_batch: usize,
    pub ins_text_ratio: usize,
    pub ins_text_len: usize,
    pub ins_peak_lr: f64,
    pub ins_min_lr: f64,
    pub ins_warmup_frac: f64,
    pub ins_weight_decay: f64,
    pub ins_adam_beta2: f64,
    pub ins_grad_clip: f64,
    pub ins_shuffle_options: bool,
    pub ins_data_fraction: f64,
    pub ins_task_cap_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            line_freq: 50,
            window_seconds: 4.0,
            synth_task: "abnormal".into(),
            synth_signatures: vec![vec![(6.0, 100.0)], vec![(30.0, 100.0)]],
            synth_noise_uv: 10.0,
            synth_channels: vec!["CZ".into(), "PZ".into()],
            synth_fs: 256.0,
            synth_train_per_class: 32,
            synth_val_per_class: 8,
            synth_test_per_class: 16,
            tok_layers: 2,
            tok_hidden: 64,
            tok_heads: 4,
            tok_mlp: 256,
            tok_decoder_layers: 3,
            tok_codebook: 256,
            tok_code_dim: 32,
            tok_beta: 1.0,
            tok_reconstruct: "both".into(),
            tok_align: true,
            tok_steps: 500,
            tok_epochs: 0.0,
            tok_eeg_batch: 16,
            tok_text_batch: 4,
            tok_peak_lr: 1.5e-3,
            tok_min_lr: 3e-4,
            tok_warmup_frac: 0.1,
            tok_weight_decay: 1e-4,
            tok_adam_beta2: 0.999,
            tok_dead_code_steps: 10,
            lm_preset: "desk".into(),
            lm_layers: 4,
            lm_hidden: 64,
            lm_heads: 4,
            lm_mlp: 256,
            lm_max_seq: 1024,
            lm_tied_head: false,
            pre_steps: 600,
            pre_epochs: 0.0,
            pre_eeg_batch: 8,
            pre_text_ratio: 15,
            pre_text_len: 64,
            pre_peak_lr: 6e-4,
            pre_min_lr: 6e-5,
            pre_warmup_frac: 0.1,
            pre_weight_decay: 0.1,
            pre_adam_beta2: 0.95,
            pre_grad_clip: 1.0,
            ins_steps: 400,
            ins_epochs: 0.0,
            ins_batch: 16,
            ins_text_ratio: 4,
            ins_text_len: 48,
            ins_peak_lr: 5e-4,
            ins_min_lr: 5e-5,
            ins_warmup_frac: 0.1,
            ins_weight_decay: 0.1,
            ins_adam_beta2: 0.95,
            ins_grad_clip: 1.0,
            ins_shuffle_options: true,
            ins_data_fraction: 1.0,
            ins_task_cap_ratio: 8.0,
        }
    }
}

fn parse_signatures(v: &str) -> std::result::Result<Vec<Vec<(f64, f64)>>, String> {
    let mut classes = Vec::new();
    for class in v.split('|') {
        let mut bands = Vec::new();
        for band in class.split(',') {
            let (hz, amp) = band
                .split_once(':')
                .ok_or_else(|| format!("band {band:?} must be hz:amplitude"))?;
            bands.push((
                hz.trim().parse::<f64>().map_err(|e| e.to_string())?,
                amp.trim().parse::<f64>().map_err(|e| e.to_string())?,
            ));
        }
        classes.push(bands);
    }
    Ok(classes)
}

fn fmt_signatures(sigs: &[Vec<(f64, f64)>]) -> String {
    sigs.iter()
        .map(|bands| {
            bands
                .iter()
                .map(|(hz, amp)| format!("{hz}:{amp}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("|")
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
                match key {
                    $($key => { config_keys!(@parse self, $field, $kind, value); Ok(true) })+
                    _ => Ok(false),
                }
            }

            /// Canonical serialization of every key, sorted, one per line.
            pub fn resolved_text(&self) -> String {
                let mut lines: Vec<String> = vec![
                    $(config_keys!(@fmt self, $key, $field, $kind)),+
                ];
                lines.sort();
                lines.join("\n") + "\n"
            }
        }
    };
    (@parse $self:ident, $field:ident, u64, $v:expr) => {
        $self.$field = $v.parse::<u64>().map_err(|e| e.to_string())?
    };
    (@parse $self:ident, $field:ident, u32, $v:expr) => {
        $self.$field = $v.parse::<u32>().map_err(|e| e.to_string())?
    };
    (@parse $self:ident, $field:ident, usize, $v:expr) => {
        $self.$field = $v.parse::<usize>().map_err(|e| e.to_string())?
    };
    (@parse $self:ident, $field:ident, f64, $v:expr) => {
        $self.$field = $v.parse::<f64>().map_err(|e| e.to_string())?
    };
    (@parse $self:ident, $field:ident, bool, $v:expr) => {
        $self.$field = $v.parse::<bool>().map_err(|e| e.to_string())?
    };
    (@parse $self:ident, $field:ident, string, $v:expr) => {
        $self.$field = $v.to_string()
    };
    (@parse $self:ident, $field:ident, strings, $v:expr) => {
        $self.$field = $v.split(',').map(|s| s.trim().to_string()).collect()
    };
    (@parse $self:ident, $field:ident, signatures, $v:expr) => {
        $self.$field = parse_signatures($v)?
    };
    (@fmt $self:ident, $key:literal, $field:ident, strings) => {
        format!("{} = {}", $key, $self.$field.join(","))
    };
    (@fmt $self:ident, $key:literal, $field:ident, signatures) => {
        format!("{} = {}", $key, fmt_signatures(&$self.$field))
    };
    (@fmt $self:ident, $key:literal, $field:ident, $kind:tt) => {
        format!("{} = {}", $key, $self.$field)
    };
}

config_keys! {
    "seed" => seed: u64,
    "data.line_freq" => line_freq: u32,
    "data.window_seconds" => window_seconds: f64,
    "synth.task" => synth_task: string,
    "synth.signatures" => synth_signatures: signatures,
    "synth.noise_uv" => synth_noise_uv: f64,
    "synth.channels" => synth_channels: strings,
    "synth.fs" => synth_fs: f64,
    "synth.train_per_class" => synth_train_per_class: usize,
    "synth.val_per_class" => synth_val_per_class: usize,
    "synth.test_per_class" => synth_test_per_class: usize,
    "tokenizer.layers" => tok_layers: usize,
    "tokenizer.hidden" => tok_hidden: usize,
    "tokenizer.heads" => tok_heads: usize,
    "tokenizer.mlp" => tok_mlp: usize,
    "tokenizer.decoder_layers" => tok_decoder_layers: usize,
    "tokenizer.codebook" => tok_codebook: usize,
    "tokenizer.code_dim" => tok_code_dim: usize,
    "tokenizer.beta" => tok_beta: f64,
    "tokenizer.reconstruct" => tok_reconstruct: string,
    "tokenizer.align" => tok_align: bool,
    "tokenizer.steps" => tok_steps: u64,
    "tokenizer.epochs" => tok_epochs: f64,
    "tokenizer.eeg_batch" => tok_eeg_batch: usize,
    "tokenizer.text_batch" => tok_text_batch: usize,
    "tokenizer.peak_lr" => tok_peak_lr: f64,
    "tokenizer.min_lr" => tok_min_lr: f64,
    "tokenizer.warmup_frac" => tok_warmup_frac: f64,
    "tokenizer.weight_decay" => tok_weight_decay: f64,
    "tokenizer.adam_beta2" => tok_adam_beta2: f64,
    "tokenizer.dead_code_steps" => tok_dead_code_steps: u64,
    "lm.preset" => lm_preset: string,
    "lm.layers" => lm_layers: usize,
    "lm.hidden" => lm_hidden: usize,
    "lm.heads" => lm_heads: usize,
    "lm.mlp" => lm_mlp: usize,
    "lm.max_seq" => lm_max_seq: usize,
    "lm.tied_head" => lm_tied_head: bool,
    "pretrain.steps" => pre_steps: u64,
    "pretrain.epochs" => pre_epochs: f64,
    "pretrain.eeg_batch" => pre_eeg_batch: usize,
    "pretrain.text_ratio" => pre_text_ratio: usize,
    "pretrain.text_len" => pre_text_len: usize,
    "pretrain.peak_lr" => pre_peak_lr: f64,
    "pretrain.min_lr" => pre_min_lr: f64,
    "pretrain.warmup_frac" => pre_warmup_frac: f64,
    "pretrain.weight_decay" => pre_weight_decay: f64,
    "pretrain.adam_beta2" => pre_adam_beta2: f64,
    "pretrain.grad_clip" => pre_grad_clip: f64,
    "instruct.steps" => ins_steps: u64,
    "instruct.epochs" => ins_epochs: f64,
    "instruct.batch" => ins_batch: usize,
    "instruct.text_ratio" => ins_text_ratio: usize,
    "instruct.text_len" => ins_text_len: usize,
    "instruct.peak_lr" => ins_peak_lr: f64,
    "instruct.min_lr" => ins_min_lr: f64,
    "instruct.warmup_frac" => ins_warmup_frac: f64,
    "instruct.weight_decay" => ins_weight_decay: f64,
    "instruct.adam_beta2" => ins_adam_beta2: f64,
    "instruct.grad_clip" => ins_grad_clip: f64,
    "instruct.shuffle_options" => ins_shuffle_options: bool,
    "instruct.data_fraction" => ins_data_fraction: f64,
    "instruct.task_cap_ratio" => ins_task_cap_ratio: f64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::BadLine {
                line,
                detail: format!("expected key = value, got {trimmed:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey { line, key: key.into() });
            }
            match cfg.set(key, value) {
                Ok(true) => {}
                Ok(false) => return Err(ConfigError::UnknownKey { line, key: key.into() }),
                Err(detail) => return Err(ConfigError::BadValue { key: key.into(), detail }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.line_freq != 50 && self.line_freq != 60 {
            return Err(ConfigError::Invalid(format!(
                "data.line_freq must be 50 or 60, got {}",
                self.line_freq
            )));
        }
        if self.tok_align && self.tok_hidden != self.lm_hidden {
            return Err(ConfigError::Invalid(format!(
                "alignment requires tokenizer.hidden ({}) to equal lm.hidden ({})",
                self.tok_hidden, self.lm_hidden
            )));
        }
        self.tok_reconstruct.parse::<Reconstruct>().map_err(ConfigError::Invalid)?;
        if LMConfig::preset(&self.lm_preset).is_none() {
            return Err(ConfigError::Invalid(format!("unknown lm.preset {:?}", self.lm_preset)));
        }
        Ok(())
    }

    pub fn line_freq(&self) -> LineFreq {
        if self.line_freq == 60 {
            LineFreq::Hz60
        } else {
            LineFreq::Hz50
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            patch_len: crate::signal::PATCH_LEN,
            encoder: StackConfig {
                layers: self.tok_layers,
                hidden: self.tok_hidden,
                heads: self.tok_heads,
                mlp: self.tok_mlp,
            },
            decoder: StackConfig {
                layers: self.tok_decoder_layers,
                hidden: self.tok_hidden,
                heads: self.tok_heads,
                mlp: self.tok_mlp,
            },
            codebook_size: self.tok_codebook,
            code_dim: self.tok_code_dim,
            max_patches: self.lm_max_seq,
            beta: self.tok_beta,
            reconstruct: self.tok_reconstruct.parse().expect("validated"),
        }
    }

    /// The preset gives the base shape; explicit lm.* keys then override.
    pub fn lm_config(&self) -> LMConfig {
        let mut cfg = LMConfig::preset(&self.lm_preset).expect("validated");
        if self.lm_preset == "desk" {
            cfg.stack.layers = self.lm_layers;
            cfg.stack.hidden = self.lm_hidden;
            cfg.stack.heads = self.lm_heads;
            cfg.stack.mlp = self.lm_mlp;
        }
        cfg.max_seq = self.lm_max_seq;
        cfg.tied_head = self.lm_tied_head;
        cfg
    }

    pub fn synth_spec(&self) -> SynthTaskSpec {
        SynthTaskSpec {
            task: self.synth_task.clone(),
            classes: self
                .synth_signatures
                .iter()
                .map(|bands| ClassSignature { bands: bands.clone() })
                .collect(),
            noise_uv: self.synth_noise_uv,
            channels: self.synth_channels.clone(),
            fs: self.synth_fs,
            window_seconds: self.window_seconds,
            windows_per_class: self.synth_train_per_class
                + self.synth_val_per_class
                + self.synth_test_per_class,
            seed: self.seed,
        }
    }

    pub fn tokenizer_train_options(&self, steps: u64) -> TokenizerTrainOptions {
        TokenizerTrainOptions {
            steps,
            eeg_batch: self.tok_eeg_batch,
            text_batch: self.tok_text_batch,
            peak_lr: self.tok_peak_lr,
            min_lr: self.tok_min_lr,
            warmup_frac: self.tok_warmup_frac,
            weight_decay: self.tok_weight_decay,
            adam_beta2: self.tok_adam_beta2,
            align: self.tok_align,
            dead_code_steps: self.tok_dead_code_steps,
            seed: self.seed,
        }
    }

    pub fn pretrain_options(&self, steps: u64) -> PretrainOptions {
        PretrainOptions {
            steps,
            eeg_batch: self.pre_eeg_batch,
            text_ratio: self.pre_text_ratio,
            text_len: self.pre_text_len,
            peak_lr: self.pre_peak_lr,
            min_lr: self.pre_min_lr,
            warmup_frac: self.pre_warmup_frac,
            weight_decay: self.pre_weight_decay,
            adam_beta2: self.pre_adam_beta2,
            grad_clip: self.pre_grad_clip,
            seed: self.seed,
        }
    }

    pub fn tune_options(&self, steps: u64) -> TuneOptions {
        TuneOptions {
            steps,
            batch: self.ins_batch,
            text_ratio: self.ins_text_ratio,
            text_len: self.ins_text_len,
            peak_lr: self.ins_peak_lr,
            min_lr: self.ins_min_lr,
            warmup_frac: self.ins_warmup_frac,
            weight_decay: self.ins_weight_decay,
            adam_beta2: self.ins_adam_beta2,
            grad_clip: self.ins_grad_clip,
            shuffle_options: self.ins_shuffle_options,
            data_fraction: self.ins_data_fraction,
            task_cap_ratio: self.ins_task_cap_ratio,
            seed: self.seed,
        }
    }

    /// Steps for a stage: explicit steps unless epochs is set, in which
    /// case steps = ceil(epochs * n_examples / batch).
    pub fn stage_steps(steps: u64, epochs: f64, n_examples: usize, batch: usize) -> u64 {
        if epochs > 0.0 {
            ((epochs * n_examples as f64) / batch.max(1) as f64).ceil() as u64
        } else {
            steps
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_resolved_text() {
        let cfg = RunConfig::default();
        let text = cfg.resolved_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("nope.key = 3\n"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2\n"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn dimension_contract_checked_at_load() {
        let err = RunConfig::parse("tokenizer.hidden = 32\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        // disabling alignment lifts the constraint
        let ok = RunConfig::parse("tokenizer.hidden = 32\ntokenizer.align = false\n");
        assert!(ok.is_ok());
    }

    #[test]
    fn signatures_parse_and_format() {
        let cfg = RunConfig::parse("synth.signatures = 6:100,12:50|30:100\n").unwrap();
        assert_eq!(
            cfg.synth_signatures,
            vec![vec![(6.0, 100.0), (12.0, 50.0)], vec![(30.0, 100.0)]]
        );
        let text = cfg.resolved_text();
        assert!(text.contains("synth.signatures = 6:100,12:50|30:100"));
    }

    #[test]
    fn epochs_override_steps() {
        assert_eq!(RunConfig::stage_steps(500, 0.0, 64, 16), 500);
        assert_eq!(RunConfig::stage_steps(500, 2.0, 64, 16), 8);
    }

    #[test]
    fn presets_resolve() {
        let cfg = RunConfig::parse("lm.preset = b\ntokenizer.align = false\n").unwrap();
        let lm = cfg.lm_config();
        assert_eq!((lm.stack.layers, lm.stack.hidden), (12, 768));
        assert!(RunConfig::parse("lm.preset = nope\n").is_err());
    }
}
