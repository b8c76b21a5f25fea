//! End-to-end plumbing between the stages: synthetic dataset layout on
//! disk, preprocessing of a dataset directory, manifest window loading,
//! frozen-encoder dataset encoding, and checkpoint conventions.
//!
//! Dataset directory layout:
//! ```text
//! <dir>/recordings/*.nlm
//! <dir>/train.manifest  (JSONL; paths relative to the manifest)
//! <dir>/val.manifest
//! <dir>/test.manifest
//! <dir>/resolved.cfg
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataio::{
    self, manifest::ManifestDataset, read_recording, synth_generate, write_manifest,
    write_recording, Checkpoint, DataIoError, ManifestEntry,
};
use crate::instruct::{task_classes, InstructItem};
use crate::lm::LanguageModel;
use crate::mcar::McarSample;
use crate::metrics::{MetricsError, MetricsReport};
use crate::signal::{self, RawRecording, SignalError, TARGET_FS};
use crate::tensor::TensorError;
use crate::tokenizer::{PreparedSample, Tokenizer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("signal: {0}")]
    Signal(#[from] SignalError),
    #[error("data: {0}")]
    DataIo(#[from] DataIoError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Windows of one class grouped into a single recording file.
const WINDOWS_PER_RECORDING: usize = 8;

/// Generate the synthetic dataset and write recordings plus the three
/// split manifests under `out`.
pub fn synth_to_dir(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.synth_spec();
    let windows = synth_generate(&spec)?;
    let rec_dir = out.join("recordings");
    std::fs::create_dir_all(&rec_dir)?;

    let l_raw = spec.window_len();
    let per_class = spec.windows_per_class;
    let mut split_entries: BTreeMap<&str, Vec<ManifestEntry>> = BTreeMap::new();

    for class in 0..spec.classes.len() {
        let class_windows: Vec<_> =
            windows.iter().filter(|w| w.label == class).collect();
        assert_eq!(class_windows.len(), per_class);
        for (group_idx, group) in class_windows.chunks(WINDOWS_PER_RECORDING).enumerate() {
            let name = format!("rec_{}_c{}_{:03}.nlm", spec.task, class, group_idx);
            // concatenate the group's windows channel-wise
            let c = spec.channels.len();
            let total = group.len() * l_raw;
            let mut samples = vec![0.0f32; c * total];
            for (w_idx, w) in group.iter().enumerate() {
                for ch in 0..c {
                    let src = &w.data[ch * l_raw..(ch + 1) * l_raw];
                    let dst_start = ch * total + w_idx * l_raw;
                    samples[dst_start..dst_start + l_raw].copy_from_slice(src);
                }
            }
            let rec = RawRecording::new(
                spec.channels.clone(),
                spec.fs,
                samples,
                cfg.line_freq(),
            )?;
            write_recording(&rec_dir.join(&name), &rec)?;

            for (w_idx, _w) in group.iter().enumerate() {
                let flat = group_idx * WINDOWS_PER_RECORDING + w_idx;
                let split = if flat < cfg.synth_train_per_class {
                    "train"
                } else if flat < cfg.synth_train_per_class + cfg.synth_val_per_class {
                    "val"
                } else {
                    "test"
                };
                split_entries.entry(split).or_default().push(ManifestEntry {
                    recording: format!("recordings/{name}"),
                    offset: (w_idx * l_raw) as u64,
                    task: spec.task.clone(),
                    label: class,
                });
            }
        }
    }
    for split in ["train", "val", "test"] {
        let entries = split_entries.remove(split).unwrap_or_default();
        write_manifest(&out.join(format!("{split}.manifest")), &entries)?;
    }
    std::fs::write(out.join("resolved.cfg"), cfg.resolved_text())?;
    Ok(())
}

/// Preprocess every recording referenced by the manifests in `in_dir` and
/// write a parallel dataset at 200 Hz under `out`, with window offsets
/// rescaled exactly.
pub fn preprocess_dir(cfg: &RunConfig, in_dir: &Path, out: &Path) -> Result<()> {
    let rec_dir = out.join("recordings");
    std::fs::create_dir_all(&rec_dir)?;
    let mut processed: BTreeMap<String, f64> = BTreeMap::new(); // name -> input fs

    for split in ["train", "val", "test"] {
        let manifest_path = in_dir.join(format!("{split}.manifest"));
        if !manifest_path.is_file() {
            continue;
        }
        let ds = dataio::read_instruction_manifest(&manifest_path, &|t| task_classes(t))?;
        let mut out_entries = Vec::with_capacity(ds.entries.len());
        for (entry, rec_path) in ds.entries.iter().zip(&ds.recording_paths) {
            let fs_in = match processed.get(&entry.recording) {
                Some(&fs) => fs,
                None => {
                    let raw = read_recording(rec_path, cfg.line_freq())?;
                    let fs = raw.sampling_rate;
                    let done = signal::preprocess_recording(&raw)?;
                    let name = Path::new(&entry.recording)
                        .file_name()
                        .ok_or_else(|| PipelineError::Other("bad recording path".into()))?;
                    write_recording(&rec_dir.join(name), &done)?;
                    processed.insert(entry.recording.clone(), fs);
                    fs
                }
            };
            let scaled = entry.offset as f64 * TARGET_FS / fs_in;
            if (scaled - scaled.round()).abs() > 1e-9 {
                return Err(PipelineError::Other(format!(
                    "offset {} at {} Hz does not land on a 200 Hz sample",
                    entry.offset, fs_in
                )));
            }
            let name = Path::new(&entry.recording).file_name().unwrap();
            out_entries.push(ManifestEntry {
                recording: format!("recordings/{}", name.to_string_lossy()),
                offset: scaled.round() as u64,
                task: entry.task.clone(),
                label: entry.label,
            });
        }
        write_manifest(&out.join(format!("{split}.manifest")), &out_entries)?;
    }
    std::fs::write(out.join("resolved.cfg"), cfg.resolved_text())?;
    Ok(())
}

/// One loaded manifest window, patchified and ready for the encoder.
pub struct LoadedWindow {
    pub sample: PreparedSample,
    pub task: String,
    pub label: usize,
}

/// Load a split's windows from a preprocessed dataset directory.
pub fn load_windows(cfg: &RunConfig, dir: &Path, split: &str) -> Result<Vec<LoadedWindow>> {
    let manifest_path = dir.join(format!("{split}.manifest"));
    let ds: ManifestDataset =
        dataio::read_instruction_manifest(&manifest_path, &|t| task_classes(t))?;
    let l = (cfg.window_seconds * TARGET_FS).round() as usize;

    let mut cache: BTreeMap<PathBuf, RawRecording> = BTreeMap::new();
    let mut out = Vec::with_capacity(ds.entries.len());
    for (entry, rec_path) in ds.entries.iter().zip(&ds.recording_paths) {
        if !cache.contains_key(rec_path) {
            cache.insert(rec_path.clone(), read_recording(rec_path, cfg.line_freq())?);
        }
        let rec = &cache[rec_path];
        if (rec.sampling_rate - TARGET_FS).abs() > 1e-9 {
            return Err(PipelineError::Other(format!(
                "recording {:?} is at {} Hz; preprocess the dataset first",
                entry.recording, rec.sampling_rate
            )));
        }
        let offset = entry.offset as usize;
        if offset + l > rec.n_samples() {
            return Err(PipelineError::Other(format!(
                "window [{offset}, {}) outside recording {:?}",
                offset + l,
                entry.recording
            )));
        }
        let c = rec.n_channels();
        let mut window = Vec::with_capacity(c * l);
        for ch in 0..c {
            window.extend_from_slice(&rec.channel(ch)[offset..offset + l]);
        }
        let sample = signal::EEGSample { channel_ids: rec.channel_ids.clone(), window, offset };
        let grid = signal::patchify(&sample, signal::PATCH_LEN)?;
        out.push(LoadedWindow {
            sample: PreparedSample::new(grid, &sample.channel_ids)?,
            task: entry.task.clone(),
            label: entry.label,
        });
    }
    Ok(out)
}

/// Encode windows with the frozen tokenizer into time-major samples for
/// the language model.
pub fn encode_windows(
    tokenizer: &Tokenizer<f32>,
    windows: &[LoadedWindow],
) -> Result<Vec<InstructItem>> {
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let (h, grid) = tokenizer.encode_sample(&w.sample)?;
        let eeg = McarSample::from_encoder_rows(&h, grid, w.sample.channel_ids.clone())?;
        out.push(InstructItem { eeg, task: w.task.clone(), label: w.label });
    }
    Ok(out)
}

// ── checkpoint conventions ─────────────────────────────────────────────────

pub fn save_tokenizer(path: &Path, tokenizer: &Tokenizer<f32>, step: u64, config_echo: String) -> Result<()> {
    let rng = ChaCha8Rng::seed_from_u64(0);
    let mut ck = Checkpoint::new(step, rng.get_seed(), rng.get_word_pos(), config_echo);
    ck.add_params("tokenizer", &tokenizer.params);
    ck.write(path)?;
    Ok(())
}

pub fn load_tokenizer(path: &Path, cfg: &RunConfig) -> Result<Tokenizer<f32>> {
    let ck = Checkpoint::read(path)?;
    let mut tokenizer = Tokenizer::<f32>::init(cfg.tokenizer_config(), cfg.seed)?;
    tokenizer.params = ck.load_params("tokenizer", &tokenizer.params)?;
    Ok(tokenizer)
}

pub fn save_lm(path: &Path, model: &LanguageModel<f32>, step: u64, config_echo: String) -> Result<()> {
    let rng = ChaCha8Rng::seed_from_u64(0);
    let mut ck = Checkpoint::new(step, rng.get_seed(), rng.get_word_pos(), config_echo);
    ck.add_params("lm", &model.params);
    ck.write(path)?;
    Ok(())
}

pub fn load_lm(path: &Path, cfg: &RunConfig) -> Result<LanguageModel<f32>> {
    let ck = Checkpoint::read(path)?;
    let vocab = crate::lm::MergedVocab::byte_level(cfg.tok_codebook)?;
    let mut model = LanguageModel::<f32>::init(cfg.lm_config(), vocab, cfg.tok_hidden, cfg.seed)?;
    model.params = ck.load_params("lm", &model.params)?;
    Ok(model)
}

/// Deterministic text-token stream for the text-preservation batches.
pub fn text_corpus(seed: u64, sentences: usize) -> Vec<u32> {
    dataio::synth_text(seed, sentences).bytes().map(u32::from).collect()
}

/// Per-task metric reports in deterministic order.
pub fn metrics_by_task(
    records_by_task: &BTreeMap<String, Vec<crate::metrics::EvalRecord>>,
) -> Result<BTreeMap<String, MetricsReport>> {
    let mut out = BTreeMap::new();
    for (task, records) in records_by_task {
        let n_classes = task_classes(task)
            .ok_or_else(|| PipelineError::Other(format!("unknown task {task:?}")))?;
        out.insert(task.clone(), MetricsReport::compute(records, n_classes)?);
    }
    Ok(out)
}
